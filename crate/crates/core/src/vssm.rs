//! Visual selective-scan block: four-direction selective scan with gating.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{config_err, Result};
use crate::nn::{Conv1x1, Ctx, DwConv, Init, LayerNorm, ParamId};
use crate::ops::scan::ScanDirection;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VssmConfig {
    pub d_state: usize,
    /// Inner width as a multiple of the block width.
    pub expand: usize,
    /// Rank of the Δ projection; `0` picks `ceil(dim / 16)`.
    pub dt_rank: usize,
}

impl Default for VssmConfig {
    fn default() -> Self {
        Self {
            d_state: 8,
            expand: 1,
            dt_rank: 0,
        }
    }
}

impl VssmConfig {
    pub fn rank_for(&self, dim: usize) -> usize {
        if self.dt_rank > 0 {
            self.dt_rank
        } else {
            dim.div_ceil(16).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_state == 0 || self.expand == 0 {
            return config_err("vssm d_state and expand must be positive");
        }
        Ok(())
    }
}

/// Per-direction selective-scan parameters.
#[derive(Debug, Clone)]
struct DirParams {
    x_proj: ParamId,
    dt_w: ParamId,
    dt_b: ParamId,
    a_log: ParamId,
    d: ParamId,
}

#[derive(Debug, Clone)]
pub struct Vssm {
    pub dim: usize,
    pub inner: usize,
    pub d_state: usize,
    pub rank: usize,
    norm: LayerNorm,
    in_proj: Conv1x1,
    conv: DwConv,
    dirs: Vec<DirParams>,
    out_norm: LayerNorm,
    out_proj: Conv1x1,
}

impl Vssm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, cfg: &VssmConfig) -> Result<Self> {
        cfg.validate()?;
        let inner = dim * cfg.expand;
        let n = cfg.d_state;
        let r = cfg.rank_for(dim);
        init.scope(name, |i| {
            let norm = LayerNorm::new(i, "norm", dim);
            let in_proj = Conv1x1::new(i, "in_proj", dim, 2 * inner, false);
            let conv = DwConv::new(i, "conv", inner, 3, true)?;
            let dirs = (0..4)
                .map(|k| {
                    i.scope(format!("dir{k}"), |i| {
                        let x_proj = i.uniform("x_proj", &[r + 2 * n, inner], 1.0 / (inner as f64).sqrt());
                        let dt_w = i.uniform("dt_w", &[inner, r], 1.0 / (r as f64).sqrt());
                        // softplus⁻¹ of Δ spread over [1e-3, 1e-1]
                        let dt_b: Vec<f64> = (0..inner)
                            .map(|c| {
                                let t = if inner > 1 { c as f64 / (inner - 1) as f64 } else { 0.5 };
                                let dt = (1e-3f64.ln() + t * (1e-1f64.ln() - 1e-3f64.ln())).exp();
                                dt + (-(-dt).exp_m1()).ln()
                            })
                            .collect();
                        let dt_b = i.tensor("dt_b", Tensor::from_f64(&[inner], &dt_b).unwrap());
                        let a_log: Vec<f64> = (0..inner)
                            .flat_map(|_| (1..=n).map(|s| (s as f64).ln()))
                            .collect();
                        let a_log = i.tensor("a_log", Tensor::from_f64(&[inner, n], &a_log).unwrap());
                        let d = i.ones("d", &[inner]);
                        DirParams { x_proj, dt_w, dt_b, a_log, d }
                    })
                })
                .collect();
            let out_norm = LayerNorm::new(i, "out_norm", inner);
            let out_proj = Conv1x1::new(i, "out_proj", inner, dim, false);
            Ok(Self {
                dim,
                inner,
                d_state: n,
                rank: r,
                norm,
                in_proj,
                conv,
                dirs,
                out_norm,
                out_proj,
            })
        })
    }

    /// `f + out_proj(LN(merge(scan₁..₄)) ⊙ silu(z))` on `[B, dim, H, W]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let (_, _, h, w) = ctx.g.value(f).dims4()?;
        let (n, r) = (self.d_state, self.rank);
        let xn = self.norm.map(ctx, f);
        let xz = self.in_proj.forward(ctx, xn);
        let parts = ctx.g.split(xz, 1, &[self.inner, self.inner]);
        let (x, z) = (parts[0], parts[1]);
        let x = self.conv.forward(ctx, x)?;
        let x = ctx.g.silu(x);

        let mut seqs = Vec::with_capacity(4);
        for (dir, p) in ScanDirection::ALL.into_iter().zip(&self.dirs) {
            let s = ctx.g.cross_scan_dir(x, dir);
            let xp = ctx.p(p.x_proj);
            let proj = ctx.g.linear(s, xp, None);
            let pr = ctx.g.split(proj, 2, &[r, n, n]);
            let (dtw, dtb) = (ctx.p(p.dt_w), ctx.p(p.dt_b));
            let dt = ctx.g.linear(pr[0], dtw, Some(dtb));
            let dt = ctx.g.softplus(dt);
            let a_log = ctx.p(p.a_log);
            let a = ctx.g.exp(a_log);
            let a = ctx.g.neg(a);
            let dskip = ctx.p(p.d);
            let y = ctx.g.selective_scan(s, dt, a, pr[1], pr[2], dskip)?;
            seqs.push((y, dir));
        }
        let merged = ctx.g.cross_merge(&seqs, h, w)?;
        let y = self.out_norm.map(ctx, merged);
        let gate = ctx.g.silu(z);
        let y = ctx.g.mul(y, gate);
        let y = self.out_proj.forward(ctx, y);
        Ok(ctx.g.add(f, y))
    }

    /// Residual output projection.
    pub fn out_proj(&self) -> &Conv1x1 {
        &self.out_proj
    }
}
