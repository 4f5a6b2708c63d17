//! Analytic parameter and multiply-accumulate counts.
//!
//! MACs cover convolutions, linear maps, attention matmuls and the selective
//! scan; FFTs, norms, activations, resizing and pooling are not counted.

use std::ops::{Add, AddAssign};

use crate::backbone::ModelConfig;
use crate::error::Result;
use crate::hmm::{FusionScheme, HmmConfig};
use crate::nn::pooled_dims;
use crate::ops::conv::conv_out_dim;
use crate::pfi::{PfiConfig, PriorFusion, TextQueryMode};
use crate::priors::PATCH;
use crate::vssm::VssmConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            macs: self.macs + o.macs,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(it: I) -> Cost {
        it.fold(Cost::default(), Add::add)
    }
}

fn c(params: usize, macs: usize) -> Cost {
    Cost {
        params: params as u64,
        macs: macs as u64,
    }
}

pub fn conv1x1(cin: usize, cout: usize, bias: bool, hw: usize) -> Cost {
    c(cin * cout + usize::from(bias) * cout, cin * cout * hw)
}

pub fn conv2d(cin: usize, cout: usize, k: usize, stride: usize, h: usize, w: usize) -> Cost {
    let (ho, wo) = (conv_out_dim(h, k, stride, k / 2), conv_out_dim(w, k, stride, k / 2));
    c(cout * cin * k * k + cout, cout * cin * k * k * ho * wo)
}

pub fn dwconv(ch: usize, k: usize, bias: bool, hw: usize) -> Cost {
    c(ch * k * k + usize::from(bias) * ch, ch * k * k * hw)
}

pub fn linear(fin: usize, fout: usize, bias: bool, rows: usize) -> Cost {
    c(fin * fout + usize::from(bias) * fout, rows * fin * fout)
}

pub fn layer_norm(ch: usize) -> Cost {
    c(2 * ch, 0)
}

/// Projected multi-head attention between `lq` queries and `lk` keys.
pub fn attention(ch: usize, lq: usize, lk: usize) -> Cost {
    c(4 * ch * (ch + 1), 2 * lq * ch * ch + 2 * lk * ch * ch + 2 * lq * lk * ch)
}

fn guarded(h: usize, w: usize, limit: usize) -> usize {
    let (a, b) = pooled_dims(h, w, limit);
    a * b
}

pub fn vssm(dim: usize, cfg: &VssmConfig, hw: usize) -> Cost {
    let inner = dim * cfg.expand;
    let (n, r) = (cfg.d_state, cfg.rank_for(dim));
    let per_dir = c(
        (r + 2 * n) * inner + inner * r + inner + inner * n + inner,
        hw * inner * (r + 2 * n) + hw * r * inner + hw * inner * (2 * n + 1),
    );
    layer_norm(dim)
        + conv1x1(dim, 2 * inner, false, hw)
        + dwconv(inner, 3, true, hw)
        + per_dir
        + per_dir
        + per_dir
        + per_dir
        + layer_norm(inner)
        + conv1x1(inner, dim, false, hw)
}

pub fn spatial_branch(cfg: &HmmConfig, hw: usize) -> Cost {
    let q = cfg.channels / 4;
    let global = |d: usize| vssm(d, &cfg.vssm, hw) + conv1x1(d, d, true, hw);
    let local = |d: usize| {
        if cfg.dw_enabled {
            dwconv(d, cfg.dw_kernel, true, hw)
        } else {
            Cost::default()
        }
    };
    global(q) + local(q) + global(q) + local(q) + global(2 * q) + local(2 * q) + conv1x1(4 * q, 4 * q, true, hw)
}

pub fn ffcm(ch: usize, expand: usize, h: usize, w: usize) -> Cost {
    let (hw, spec) = (h * w, h * (w / 2 + 1));
    conv1x1(ch, ch, true, hw)
        + conv1x1(2 * ch, 2 * ch * expand, true, spec)
        + conv1x1(2 * ch * expand, 2 * ch, true, spec)
        + dwconv(ch, 3, true, hw)
        + dwconv(ch, 5, true, hw)
        + conv1x1(3 * ch, ch, true, hw)
}

pub fn hmm(cfg: &HmmConfig, h: usize, w: usize) -> Cost {
    let (ch, hw) = (cfg.channels, h * w);
    let mut total = spatial_branch(cfg, hw);
    if cfg.ffcm_enabled {
        total += ffcm(ch, cfg.spectral_expand, h, w);
    }
    total += match cfg.fusion_scheme {
        FusionScheme::ConcatConv => {
            conv1x1(if cfg.ffcm_enabled { 2 * ch } else { ch }, ch, true, hw)
        }
        FusionScheme::Addition => Cost::default(),
        FusionScheme::CrossAttention => {
            let l = guarded(h, w, cfg.attn_token_limit);
            layer_norm(ch) + layer_norm(ch) + attention(ch, l, l)
        }
    };
    total
}

pub fn pfi(cfg: &PfiConfig, h: usize, w: usize, n_text: usize) -> Cost {
    let (ch, hw) = (cfg.channels, h * w);
    let l = guarded(h, w, cfg.attn_token_limit);
    let hidden = cfg.gdfn_hidden();
    let mut total = layer_norm(ch)
        + attention(ch, l, l)
        + layer_norm(ch)
        + conv1x1(ch, 2 * hidden, false, hw)
        + dwconv(2 * hidden, 3, false, hw)
        + conv1x1(hidden, ch, false, hw);
    let (v, t) = (cfg.inject_visual, cfg.inject_text);
    total += match cfg.fusion_scheme {
        PriorFusion::Hierarchical => {
            let mut x = Cost::default();
            if v {
                x += layer_norm(ch) + layer_norm(ch) + attention(ch, l, l);
            }
            if t {
                x += layer_norm(ch) + layer_norm(ch);
                x += match cfg.text_query_mode {
                    TextQueryMode::TextQueries => attention(ch, n_text, l) + linear(ch, 2 * ch, true, 1),
                    TextQueryMode::FeatureQueries => attention(ch, l, n_text),
                };
            }
            x
        }
        PriorFusion::Addition => {
            let mut x = Cost::default();
            if v {
                x += conv1x1(ch, ch, true, hw);
            }
            if t {
                x += linear(ch, ch, true, n_text);
            }
            x
        }
        PriorFusion::Concat => conv1x1((1 + usize::from(v) + usize::from(t)) * ch, ch, true, hw),
        PriorFusion::JointCrossAttention => {
            let lk = if v { l } else { 0 } + if t { n_text } else { 0 };
            layer_norm(ch) * 3 + attention(ch, l, lk)
        }
    };
    total
}

impl std::ops::Mul<u64> for Cost {
    type Output = Cost;
    fn mul(self, k: u64) -> Cost {
        Cost {
            params: self.params * k,
            macs: self.macs * k,
        }
    }
}

/// Breakdown of a whole-network count for one `h × w` image.
#[derive(Debug, Clone, Default)]
pub struct Complexity {
    pub total: Cost,
    pub hmm: Cost,
    pub pfi: Cost,
    pub adapters: Cost,
    pub other: Cost,
}

/// Counts for one `h × w` image (padded internally like the forward pass).
pub fn model_cost(cfg: &ModelConfig, h: usize, w: usize) -> Result<Complexity> {
    cfg.validate()?;
    let m = cfg.pad_multiple();
    let (h, w) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let plan = cfg.plan();
    let n = cfg.num_stages();
    let nd = cfg.num_down();
    let dims = |s: usize| (h >> cfg.level(s), w >> cfg.level(s));
    let mut out = Complexity::default();
    out.other += conv2d(3, plan[0], 3, 1, h, w);
    for s in 0..n {
        let (hs, ws) = dims(s);
        if s > nd {
            let (hp, wp) = dims(s - 1);
            out.other += conv2d(plan[s - 1], 4 * plan[s], 3, 1, hp, wp) + conv1x1(2 * plan[s], plan[s], true, hs * ws);
        }
        out.hmm += hmm(&cfg.hmm_config(s), hs, ws) * cfg.stage_depths[s] as u64;
        if s < nd {
            out.other += conv2d(plan[s], plan[s + 1], 3, 2, hs, ws);
        }
        if s >= nd {
            out.pfi += pfi(&cfg.pfi_config(s), hs, ws, 1);
        }
    }
    out.other += conv2d(plan[n - 1], 3, 3, 1, h, w);

    let prior_stages: Vec<usize> = cfg.pfi_stages().rev().collect();
    if cfg.inject_visual {
        let grid = (h / PATCH) * (w / PATCH);
        let c0 = plan[prior_stages[0]];
        out.adapters += conv1x1(cfg.visual_dim, c0, true, grid);
        for pair in prior_stages.windows(2) {
            let (ca, cb) = (plan[pair[0]], plan[pair[1]]);
            let (ha, wa) = dims(pair[0]);
            let (hb, wb) = dims(pair[1]);
            out.adapters += conv2d(ca, ca, 3, 1, ha, wa) + conv1x1(4 * ca, cb, true, hb * wb);
        }
    }
    if cfg.inject_text {
        out.adapters += linear(cfg.text_dim, cfg.clip_bottleneck, true, 1);
        for &s in &prior_stages {
            out.adapters += linear(cfg.clip_bottleneck, plan[s], true, 1);
        }
    }
    out.total = out.hmm + out.pfi + out.adapters + out.other;
    Ok(out)
}

/// `(params, MACs)` at the 256×256 reference resolution.
pub fn count_params_flops(cfg: &ModelConfig) -> Result<(u64, u64)> {
    let c = model_cost(cfg, 256, 256)?;
    Ok((c.total.params, c.total.macs))
}
