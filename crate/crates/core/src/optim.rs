//! Adam, cosine learning-rate annealing and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One bias-corrected update; parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = T::lit(lr / bc1);
        let (b1, b2, eps) = (T::lit(b1), T::lit(b2), T::lit(self.cfg.eps));
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.tensors_mut()[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                p[k] -= step * m[k] / (v[k].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

/// `lr(t) = lr_min + ½(lr₀ − lr_min)(1 + cos(π t / (T − 1)))` for `t < T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub initial: f64,
    pub final_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(initial: f64, final_lr: f64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return config_err("schedule needs at least one step");
        }
        if !(final_lr <= initial) || final_lr < 0.0 {
            return config_err(format!("final lr {final_lr} must lie in [0, {initial}]"));
        }
        Ok(Self {
            initial,
            final_lr,
            total_steps,
        })
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps <= 1 {
            return self.initial;
        }
        let t = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.final_lr + 0.5 * (self.initial - self.final_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = CosineSchedule::new(1e-3, 1e-5, 101).unwrap();
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(100) - 1e-5).abs() < 1e-18);
        assert!((s.lr(50) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(CosineSchedule::new(1e-5, 1e-3, 10).is_err());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Some(Tensor::<f64>::full(&[4], 3.0)), None, Some(Tensor::full(&[1], 4.0))];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - (36.0f64 + 16.0).sqrt()).abs() < 1e-12);
        assert!((clip_grad_norm(&mut g, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("w".into(), Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = vec![Some(Tensor::from_f64(&[2], &[0.5, -2.0]).unwrap())];
        adam.step(&mut store, &g, 0.1);
        let w = store.tensors()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
