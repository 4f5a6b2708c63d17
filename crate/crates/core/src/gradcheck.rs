//! Central finite-difference checks against the tape's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::Result;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Outcome of one check: `rel_err = ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_norm: f64,
    pub coords: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err <= tol && self.analytic_norm.is_finite()
    }
}

/// Options for [`check_module`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per tensor; every coordinate when `None`.
    pub per_tensor: Option<usize>,
    /// Also perturb parameters, not only inputs.
    pub params: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            per_tensor: None,
            params: true,
            seed: 0,
        }
    }
}

/// Fill every parameter with `N(0, scale²)` so that zero-initialized
/// branches contribute to the checked gradients.
pub fn randomize_params(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, scale, &mut rng);
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sample_coords(len: usize, k: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match k {
        Some(k) if k < len => (0..k).map(|_| rng.gen_range(0..len)).collect(),
        _ => (0..len).collect(),
    }
}

/// Check `d/dθ Σ f(θ)⊙R` for the inputs (and optionally the parameters) of `f`,
/// where `R` is a fixed random weighting of the output.
pub fn check_module<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // analytic pass, also fixing the output weighting
    let (weights, in_grads, p_grads) = {
        let mut ctx = Ctx::new(store, opts.params);
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.g.leaf(t.clone(), true)).collect();
        let out = f(&mut ctx, &vars)?;
        let shape = ctx.g.shape(out).to_vec();
        let weights = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
        let mut grads = ctx.g.backward_with(out, weights.clone());
        let in_grads: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let p_grads = ctx.param_grads(&mut grads);
        (weights, in_grads, p_grads)
    };

    let objective = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut ctx = Ctx::new(store, false);
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.input(t.clone())).collect();
        let out = f(&mut ctx, &vars)?;
        Ok(ctx
            .g
            .value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let h = opts.step;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, g) in in_grads.iter().enumerate() {
        for c in sample_coords(g.len(), opts.per_tensor, &mut rng) {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + h;
            let fp = objective(store, &work)?;
            work[i].data_mut()[c] = orig - h;
            let fm = objective(store, &work)?;
            work[i].data_mut()[c] = orig;
            analytic.push(g.data()[c]);
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    if opts.params {
        for (p, g) in p_grads.iter().enumerate() {
            let Some(g) = g else { continue };
            for c in sample_coords(g.len(), opts.per_tensor, &mut rng) {
                let orig = store.tensors()[p].data()[c];
                store.tensors_mut()[p].data_mut()[c] = orig + h;
                let fp = objective(store, inputs)?;
                store.tensors_mut()[p].data_mut()[c] = orig - h;
                let fm = objective(store, inputs)?;
                store.tensors_mut()[p].data_mut()[c] = orig;
                analytic.push(g.data()[c]);
                numeric.push((fp - fm) / (2.0 * h));
            }
        }
    }

    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let denom = norm(&analytic).max(norm(&numeric)).max(f64::MIN_POSITIVE);
    Ok(GradCheckReport {
        rel_err: norm(&diff) / denom,
        max_abs_err: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        analytic_norm: norm(&analytic),
        coords: analytic.len(),
    })
}

/// Gradient check of a parameter-free graph function.
pub fn check_fn<F>(inputs: &[Tensor<f64>], f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let opts = GradCheckOptions {
        step,
        params: false,
        ..Default::default()
    };
    check_module(&mut store, inputs, f, &opts)
}
