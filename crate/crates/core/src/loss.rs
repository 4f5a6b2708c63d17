//! Reconstruction and frequency-contrastive training objectives.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_fcr: f64,
    pub n_negatives: usize,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_fcr: 0.1,
            n_negatives: 2,
            epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fcr >= 0.0) {
            return config_err("lambda_fcr must be non-negative");
        }
        if self.n_negatives == 0 {
            return config_err("n_negatives must be at least 1");
        }
        if !(self.epsilon > 0.0) {
            return config_err("epsilon must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub rec: Var,
    pub fcr: Var,
}

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return shape_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        ));
    }
    Ok(())
}

/// Mean absolute error.
pub fn l_rec<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(g, pred, gt, "l_rec")?;
    let d = g.sub(pred, gt);
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

/// Per-sample `Σ |Re| + |Im|` of the 2D DFT of `a − b`: `[B, 1]`.
fn spectral_l1<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let s = g.shape(a).to_vec();
    let n: usize = s[1..].iter().product();
    let d = g.sub(a, b);
    let f = g.fft2_stacked(d);
    let f = g.abs(f);
    let f = g.reshape(f, &[s[0], 1, 2 * n]);
    let m = g.mean_spatial(f);
    g.mul_scalar(m, T::from_usize(2 * n).unwrap())
}

/// `(1/n) Σᵢ ‖F(gt) − F(pred)‖₁ / (‖F(negᵢ) − F(pred)‖₁ + ε)`, averaged over the batch.
pub fn l_fcr<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var, negatives: &[Var], cfg: &LossConfig) -> Result<Var> {
    same_shape(g, pred, gt, "l_fcr")?;
    if negatives.len() != cfg.n_negatives {
        return config_err(format!(
            "l_fcr expects {} negatives, got {}",
            cfg.n_negatives,
            negatives.len()
        ));
    }
    for &neg in negatives {
        same_shape(g, pred, neg, "l_fcr negative")?;
    }
    let num = spectral_l1(g, gt, pred);
    let ratios: Vec<Var> = negatives
        .iter()
        .map(|&neg| {
            let den = spectral_l1(g, neg, pred);
            let den = g.add_scalar(den, T::lit(cfg.epsilon));
            g.div(num, den)
        })
        .collect();
    let sum = g.add_n(&ratios);
    let mean = g.mean_all(sum);
    Ok(g.mul_scalar(mean, T::one() / T::from_usize(negatives.len()).unwrap()))
}

/// `l_rec + λ·l_fcr`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Var,
    negatives: &[Var],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let rec = l_rec(g, pred, gt)?;
    let fcr = l_fcr(g, pred, gt, negatives, cfg)?;
    let weighted = g.mul_scalar(fcr, T::lit(cfg.lambda_fcr));
    let total = g.add(rec, weighted);
    Ok(LossTerms { total, rec, fcr })
}

/// Loss values on plain tensors: `(total, rec, fcr)`.
pub fn evaluate_loss<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    negatives: &[Tensor<T>],
    cfg: &LossConfig,
) -> Result<(T, T, T)> {
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let t = g.input(gt.clone());
    let n: Vec<Var> = negatives.iter().map(|x| g.input(x.clone())).collect();
    let terms = total_loss(&mut g, p, t, &n, cfg)?;
    let v = |x: Var| g.value(x).data()[0];
    Ok((v(terms.total), v(terms.rec), v(terms.fcr)))
}

/// Rainy negatives for each sample of a `[B, 3, H, W]` batch.
///
/// Each sample draws `n` distinct other rainy images of the batch; batches
/// with `B ≤ n` fall back to the sample's own rainy image.
pub fn sample_negatives<T: Scalar, R: Rng>(rain: &Tensor<T>, n: usize, rng: &mut R) -> Result<Vec<Tensor<T>>> {
    let (b, c, h, w) = rain.dims4()?;
    let plane = c * h * w;
    let mut out = vec![Vec::with_capacity(b * plane); n];
    for i in 0..b {
        let picks: Vec<usize> = if b > n {
            sample(rng, b - 1, n)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect()
        } else {
            vec![i; n]
        };
        for (k, &j) in picks.iter().enumerate() {
            out[k].extend_from_slice(&rain.data()[j * plane..(j + 1) * plane]);
        }
    }
    out.into_iter()
        .map(|d| Tensor::from_vec(&[b, c, h, w], d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_weights_fcr() {
        let mut g = Graph::<f64>::new();
        let rec = g.input(Tensor::scalar(0.2));
        let fcr = g.input(Tensor::scalar(0.5));
        let w = g.mul_scalar(fcr, 0.1);
        let t = g.add(rec, w);
        assert!((g.value(t).data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn negatives_come_from_other_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f64> = (0..4).flat_map(|i| vec![i as f64; 3 * 2 * 2]).collect();
        let rain = Tensor::from_vec(&[4, 3, 2, 2], data).unwrap();
        let negs = sample_negatives(&rain, 2, &mut rng).unwrap();
        for i in 0..4 {
            let a = negs[0].at(&[i, 0, 0, 0]);
            let b = negs[1].at(&[i, 0, 0, 0]);
            assert_ne!(a, i as f64);
            assert_ne!(b, i as f64);
            assert_ne!(a, b);
        }
        let single = rain.batch_slice(0, 2).unwrap();
        let negs = sample_negatives(&single, 2, &mut rng).unwrap();
        assert_eq!(negs[0], single);
    }
}
