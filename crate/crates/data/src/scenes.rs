//! Procedural clean scenes and synthetic paired sets.

use std::path::Path;

use mphm_core::image::Image;
use mphm_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::PairedSample;
use crate::error::Result;
use crate::io::save_png;
use crate::synth::{synth_rain, RainParams};

fn mix_seed(seed: u64, i: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ salt
}

/// Sky gradient, flat-shaded boxes and ellipses, and a faint texture, in `[0.02, 0.9]`.
pub fn procedural_scene<T: Scalar>(h: usize, w: usize, seed: u64) -> Image<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut color = || [rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.8), rng.gen_range(0.1..0.8)];
    let (top, bottom) = (color(), color());
    let mut px = vec![[0.0f64; 3]; h * w];
    for y in 0..h {
        let t = y as f64 / (h.max(2) - 1) as f64;
        for x in 0..w {
            for c in 0..3 {
                px[y * w + x][c] = top[c] * (1.0 - t) + bottom[c] * t;
            }
        }
    }
    let shapes = rng.gen_range(3..7);
    for _ in 0..shapes {
        let col = [rng.gen_range(0.05..0.85), rng.gen_range(0.05..0.85), rng.gen_range(0.05..0.85)];
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let (ry, rx) = (
            rng.gen_range(0.08..0.35) * h as f64,
            rng.gen_range(0.08..0.35) * w as f64,
        );
        let ellipse = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    px[y * w + x] = col;
                }
            }
        }
    }
    let (fy, fx, ph) = (rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4), rng.gen_range(0.0..6.28));
    let mut img = Image::constant(h, w, T::zero());
    for y in 0..h {
        for x in 0..w {
            let tex = 0.04 * (fy * y as f64 + ph).sin() * (fx * x as f64).cos();
            for c in 0..3 {
                img.set(c, y, x, T::lit((px[y * w + x][c] + tex).clamp(0.02, 0.9)));
            }
        }
    }
    img
}

/// `n` procedural pairs with ids `0000`, `0001`, ….
pub fn synthetic_pairs<T: Scalar>(n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<PairedSample<T>>> {
    (0..n as u64)
        .map(|i| {
            let clean = procedural_scene(h, w, mix_seed(seed, i, 1));
            let params = RainParams::sampled(mix_seed(seed, i, 2));
            let rainy = synth_rain(&clean, &params)?;
            Ok(PairedSample {
                rainy,
                clean,
                id: format!("{i:04}"),
            })
        })
        .collect()
}

/// Writes `root/rain/<id>.png` and `root/norain/<id>.png`.
pub fn write_pairs<T: Scalar>(root: &Path, samples: &[PairedSample<T>]) -> Result<()> {
    for s in samples {
        save_png(&root.join("rain").join(format!("{}.png", s.id)), &s.rainy)?;
        save_png(&root.join("norain").join(format!("{}.png", s.id)), &s.clean)?;
    }
    Ok(())
}
