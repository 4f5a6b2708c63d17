//! One-step training loop: forward, loss, backward, clip, Adam.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Mphm;
use crate::checkpoint::{self, Checkpoint, TrainState};
use crate::error::{config_err, Error, Result};
use crate::loss::{sample_negatives, total_loss, LossConfig};
use crate::nn::{Ctx, ParamStore};
use crate::optim::{clip_grad_norm, Adam, AdamConfig, CosineSchedule};
use crate::priors::RawBatchPriors;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: u64,
    pub lr: f64,
    pub lr_min: f64,
    pub clip_norm: f64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            lr_min: 1e-5,
            clip_norm: 1.0,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Index of the step just taken, from 0.
    pub step: u64,
    pub loss: f64,
    pub rec: f64,
    pub fcr: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct Trainer<T> {
    pub model: Mphm,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    pub schedule: CosineSchedule,
    pub opts: TrainOptions,
    /// Steps completed so far.
    pub step: u64,
    pub last_loss: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Mphm, store: ParamStore<T>, opts: TrainOptions) -> Result<Self> {
        opts.loss.validate()?;
        if !(opts.clip_norm > 0.0) {
            return config_err("clip_norm must be positive");
        }
        let schedule = CosineSchedule::new(opts.lr, opts.lr_min, opts.steps)?;
        let adam = Adam::new(opts.adam, &store);
        Ok(Self {
            model,
            store,
            adam,
            schedule,
            opts,
            step: 0,
            last_loss: None,
        })
    }

    /// Resume from a checkpoint written by [`Trainer::save`].
    pub fn resume(ck: Checkpoint<T>, opts: TrainOptions) -> Result<Self> {
        let (model, store) = ck.restore_model()?;
        let mut t = Self::new(model, store, opts)?;
        if let Some(state) = ck.state {
            t.step = state.step;
            t.last_loss = state.last_loss;
            t.schedule = state.schedule;
        }
        if let Some(adam) = ck.adam {
            t.adam = adam;
        }
        Ok(t)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    /// One optimizer step on a `[B, 3, H, W]` pair. Non-finite losses or
    /// gradients abort before any parameter is touched.
    pub fn step(&mut self, rain: &Tensor<T>, clean: &Tensor<T>, priors: &RawBatchPriors<T>) -> Result<StepStats> {
        if rain.shape() != clean.shape() {
            return Err(Error::Shape(format!(
                "rain {:?} and clean {:?} differ",
                rain.shape(),
                clean.shape()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed ^ self.step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let negatives = sample_negatives(rain, self.opts.loss.n_negatives, &mut rng)?;

        let mut ctx = Ctx::new(&self.store, true);
        let x = ctx.input(rain.clone());
        let gt = ctx.input(clean.clone());
        let negs: Vec<_> = negatives.into_iter().map(|n| ctx.input(n)).collect();
        let out = self.model.forward(&mut ctx, x, priors)?;
        let terms = total_loss(&mut ctx.g, out.pred, gt, &negs, &self.opts.loss)?;
        let val = |v| ctx.g.value(v).data()[0].to_f64().unwrap();
        let (loss, rec, fcr) = (val(terms.total), val(terms.rec), val(terms.fcr));
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss at step {}", self.step),
                index: 0,
            });
        }
        let mut grads = ctx.g.backward(terms.total);
        let mut pg = ctx.param_grads(&mut grads);
        drop(ctx);
        let grad_norm = clip_grad_norm(&mut pg, self.opts.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradients at step {}", self.step),
                index: 0,
            });
        }
        let lr = self.schedule.lr(self.step);
        self.adam.step(&mut self.store, &pg, lr);
        let stats = StepStats {
            step: self.step,
            loss,
            rec,
            fcr,
            lr,
            grad_norm,
        };
        self.step += 1;
        self.last_loss = Some(loss);
        Ok(stats)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            seed: self.opts.seed,
            schedule: self.schedule,
            adam: self.adam.cfg,
            last_loss: self.last_loss,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model.cfg, &self.store, Some(&self.adam), Some(&self.state()))
    }
}
