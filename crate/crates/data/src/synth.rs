//! Parameterized synthetic rain: sparse noise, oriented motion blur, additive layer.

use mphm_core::image::Image;
use mphm_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    /// Fraction of pixels that seed a streak, in `[0, 1]`.
    pub streak_density: f64,
    /// Streak direction measured from vertical, in `[-60, 60]`.
    pub angle_degrees: f64,
    pub streak_length_px: f64,
    pub streak_width_px: f64,
    /// Brightness added by a fully covered pixel, in `[0, 1]`.
    pub intensity: f64,
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            streak_density: 0.01,
            angle_degrees: 10.0,
            streak_length_px: 12.0,
            streak_width_px: 1.0,
            intensity: 0.6,
            seed: 0,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        if !(0.0..=1.0).contains(&self.streak_density) {
            return bad(format!("streak_density {} outside [0, 1]", self.streak_density));
        }
        if !(-60.0..=60.0).contains(&self.angle_degrees) {
            return bad(format!("angle_degrees {} outside [-60, 60]", self.angle_degrees));
        }
        if !(self.streak_length_px >= 1.0 && self.streak_length_px <= 256.0) {
            return bad(format!("streak_length_px {} outside [1, 256]", self.streak_length_px));
        }
        if !(self.streak_width_px > 0.0 && self.streak_width_px <= 16.0) {
            return bad(format!("streak_width_px {} outside (0, 16]", self.streak_width_px));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return bad(format!("intensity {} outside [0, 1]", self.intensity));
        }
        Ok(())
    }

    /// Heavy-rain style parameters drawn from `seed`.
    pub fn sampled(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            streak_density: rng.gen_range(0.006..0.02),
            angle_degrees: rng.gen_range(-30.0..30.0),
            streak_length_px: rng.gen_range(8.0..20.0),
            streak_width_px: if rng.gen_bool(0.5) { 1.0 } else { 2.0 },
            intensity: rng.gen_range(0.4..0.8),
            seed: rng.gen(),
        }
    }
}

/// Anti-aliased line segment through the kernel centre: `(radius, weights)`.
pub fn streak_kernel(length: f64, width: f64, angle_degrees: f64) -> (usize, Vec<f64>) {
    let r = (length / 2.0 + width / 2.0 + 1.0).ceil() as usize;
    let k = 2 * r + 1;
    let th = angle_degrees.to_radians();
    let (ux, uy) = (th.sin(), th.cos());
    let half = length / 2.0;
    let mut out = vec![0.0; k * k];
    for y in 0..k {
        for x in 0..k {
            let (dx, dy) = (x as f64 - r as f64, y as f64 - r as f64);
            let t = (dx * ux + dy * uy).clamp(-half, half);
            let d = ((dx - t * ux).powi(2) + (dy - t * uy).powi(2)).sqrt();
            out[y * k + x] = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    (r, out)
}

/// Streak layer in `[0, 1]` for an `h × w` image.
pub fn streak_layer(h: usize, w: usize, p: &RainParams) -> Vec<f64> {
    let mut layer = vec![0.0; h * w];
    if p.streak_density <= 0.0 || p.intensity <= 0.0 {
        return layer;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (r, kernel) = streak_kernel(p.streak_length_px, p.streak_width_px, p.angle_degrees);
    let k = 2 * r + 1;
    for y in 0..h {
        for x in 0..w {
            if rng.gen::<f64>() >= p.streak_density {
                continue;
            }
            let amp = rng.gen_range(0.6..1.0);
            for ky in 0..k {
                let Some(yy) = (y + ky).checked_sub(r).filter(|&v| v < h) else { continue };
                for kx in 0..k {
                    let Some(xx) = (x + kx).checked_sub(r).filter(|&v| v < w) else { continue };
                    layer[yy * w + xx] += amp * kernel[ky * k + kx];
                }
            }
        }
    }
    layer.iter_mut().for_each(|v| *v = v.min(1.0));
    layer
}

/// `clamp(clean + intensity · streaks)`, identical on all three channels.
pub fn synth_rain<T: Scalar>(clean: &Image<T>, p: &RainParams) -> Result<Image<T>> {
    p.validate()?;
    let (h, w) = clean.dims();
    let layer = streak_layer(h, w, p);
    let mut out = clean.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let add = p.intensity * layer[y * w + x];
                if add > 0.0 {
                    let v = clean.get(c, y, x).to_f64().unwrap() + add;
                    out.set(c, y, x, T::lit(v.clamp(0.0, 1.0)));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_a_vertical_line_at_zero_angle() {
        let (r, k) = streak_kernel(4.0, 1.0, 0.0);
        let n = 2 * r + 1;
        assert_eq!(k[r * n + r], 1.0);
        assert_eq!(k[(r + 2) * n + r], 1.0);
        assert_eq!(k[r * n + r + 2], 0.0);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let p = RainParams {
            angle_degrees: 75.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
