//! Hierarchical Mamba Module: channel-split spatial branch plus an FFT branch,
//! fused back into the input residually.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{config_err, Error, Result};
use crate::nn::{Conv1x1, Ctx, DwConv, Init, LayerNorm, MultiHeadAttention};
use crate::scalar::Scalar;
use crate::vssm::{Vssm, VssmConfig};

/// How the spatial and frequency branches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionScheme {
    #[default]
    ConcatConv,
    Addition,
    CrossAttention,
}

impl std::str::FromStr for FusionScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat_conv" => Ok(Self::ConcatConv),
            "addition" => Ok(Self::Addition),
            "cross_attention" => Ok(Self::CrossAttention),
            _ => config_err(format!("unknown branch fusion scheme `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmConfig {
    pub channels: usize,
    pub dw_kernel: usize,
    pub ffcm_enabled: bool,
    pub dw_enabled: bool,
    pub fusion_scheme: FusionScheme,
    pub vssm: VssmConfig,
    /// Hidden width of the spectral MLP as a multiple of its input.
    pub spectral_expand: usize,
    /// Heads of the cross-attention fusion variant.
    pub heads: usize,
    pub attn_token_limit: usize,
}

impl HmmConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            dw_kernel: 3,
            ffcm_enabled: true,
            dw_enabled: true,
            fusion_scheme: FusionScheme::ConcatConv,
            vssm: VssmConfig::default(),
            spectral_expand: 4,
            heads: 1,
            attn_token_limit: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return config_err(format!("HMM channels {} not divisible by 4", self.channels));
        }
        if self.dw_kernel % 2 == 0 {
            return config_err(format!("depthwise kernel size must be odd, got {}", self.dw_kernel));
        }
        if self.spectral_expand == 0 {
            return config_err("spectral_expand must be positive");
        }
        if self.fusion_scheme == FusionScheme::CrossAttention && !self.ffcm_enabled {
            return config_err("cross_attention fusion needs the frequency branch");
        }
        if self.fusion_scheme == FusionScheme::CrossAttention && self.channels % self.heads.max(1) != 0 {
            return config_err(format!("{} heads do not divide {} channels", self.heads, self.channels));
        }
        self.vssm.validate()
    }
}

/// VSSM followed by a pointwise projection.
#[derive(Debug, Clone)]
struct GlobalPath {
    vssm: Vssm,
    pw: Conv1x1,
}

impl GlobalPath {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize, cfg: &VssmConfig) -> Result<Self> {
        init.scope(name, |i| {
            Ok(Self {
                vssm: Vssm::new(i, "vssm", c, cfg)?,
                pw: Conv1x1::new(i, "pw", c, c, true),
            })
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.vssm.forward(ctx, x)?;
        Ok(self.pw.forward(ctx, y))
    }
}

fn local_path<T: Scalar>(dw: &Option<DwConv>, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    match dw {
        Some(dw) => dw.forward(ctx, x),
        None => Ok(x),
    }
}

/// Spatial branch: four-way split into global (VSSM) and local (depthwise)
/// paths, regrouped into a second global/local level.
#[derive(Debug, Clone)]
pub struct SpatialBranch {
    g1: GlobalPath,
    l2: Option<DwConv>,
    g3: GlobalPath,
    l4: Option<DwConv>,
    gl1: GlobalPath,
    gl2: Option<DwConv>,
    out: Conv1x1,
}

impl SpatialBranch {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &HmmConfig) -> Result<Self> {
        cfg.validate()?;
        let q = cfg.channels / 4;
        let k = cfg.dw_kernel;
        init.scope(name, |i| {
            let dw = |i: &mut Init<'_, T>, n: &str, c: usize| -> Result<Option<DwConv>> {
                if cfg.dw_enabled {
                    DwConv::new(i, n, c, k, true).map(Some)
                } else {
                    Ok(None)
                }
            };
            Ok(Self {
                g1: GlobalPath::new(i, "f1", q, &cfg.vssm)?,
                l2: dw(i, "f2", q)?,
                g3: GlobalPath::new(i, "f3", q, &cfg.vssm)?,
                l4: dw(i, "f4", q)?,
                gl1: GlobalPath::new(i, "gl1", 2 * q, &cfg.vssm)?,
                gl2: dw(i, "gl2", 2 * q)?,
                out: Conv1x1::new(i, "out", 4 * q, 4 * q, true),
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let f = ctx.g.chunk_channels(x, 4)?;
        let a1 = self.g1.forward(ctx, f[0])?;
        let a2 = local_path(&self.l2, ctx, f[1])?;
        let a3 = self.g3.forward(ctx, f[2])?;
        let a4 = local_path(&self.l4, ctx, f[3])?;
        let gl1 = ctx.g.concat(&[a1, a2], 1);
        let gl2 = ctx.g.concat(&[a3, a4], 1);
        let b1 = self.gl1.forward(ctx, gl1)?;
        let b2 = local_path(&self.gl2, ctx, gl2)?;
        let cat = ctx.g.concat(&[b1, b2], 1);
        Ok(self.out.forward(ctx, cat))
    }
}

/// Frequency branch: pointwise conv, half-spectrum MLP on stacked real and
/// imaginary parts, inverse FFT, then multi-scale depthwise convs merged
/// pointwise.
#[derive(Debug, Clone)]
pub struct Ffcm {
    pub pw_in: Conv1x1,
    pub mix1: Conv1x1,
    pub mix2: Conv1x1,
    pub dw3: DwConv,
    pub dw5: DwConv,
    pub merge: Conv1x1,
}

impl Ffcm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize, expand: usize) -> Result<Self> {
        init.scope(name, |i| {
            Ok(Self {
                pw_in: Conv1x1::new(i, "pw_in", c, c, true),
                mix1: Conv1x1::new(i, "mix1", 2 * c, 2 * c * expand, true),
                mix2: Conv1x1::new(i, "mix2", 2 * c * expand, 2 * c, true),
                dw3: DwConv::new(i, "dw3", c, 3, true)?,
                dw5: DwConv::new(i, "dw5", c, 5, true)?,
                merge: Conv1x1::new(i, "merge", 3 * c, c, true),
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.g.shape(x)[3];
        let y = self.pw_in.forward(ctx, x);
        let z = ctx.g.rfft2(y);
        if let Some(index) = ctx.g.value(z).first_non_finite() {
            return Err(Error::NonFinite {
                context: "frequency branch spectrum".into(),
                index,
            });
        }
        let m = self.mix1.forward(ctx, z);
        let m = ctx.g.gelu(m);
        let m = self.mix2.forward(ctx, m);
        let z = ctx.g.add(z, m);
        let s = ctx.g.irfft2(z, w);
        let d3 = self.dw3.forward(ctx, s)?;
        let d5 = self.dw5.forward(ctx, s)?;
        let cat = ctx.g.concat(&[s, d3, d5], 1);
        Ok(self.merge.forward(ctx, cat))
    }
}

#[derive(Debug, Clone)]
enum Fusion {
    ConcatConv(Conv1x1),
    Addition,
    CrossAttention {
        ln_q: LayerNorm,
        ln_kv: LayerNorm,
        attn: MultiHeadAttention,
        limit: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Hmm {
    pub cfg: HmmConfig,
    pub spatial: SpatialBranch,
    pub ffcm: Option<Ffcm>,
    fusion: Fusion,
}

impl Hmm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &HmmConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        init.scope(name, |i| {
            let spatial = SpatialBranch::new(i, "spatial", cfg)?;
            let ffcm = if cfg.ffcm_enabled {
                Some(Ffcm::new(i, "ffcm", c, cfg.spectral_expand)?)
            } else {
                None
            };
            let fusion = match cfg.fusion_scheme {
                FusionScheme::ConcatConv => {
                    let cin = if cfg.ffcm_enabled { 2 * c } else { c };
                    Fusion::ConcatConv(Conv1x1::new(i, "fuse", cin, c, true))
                }
                FusionScheme::Addition => Fusion::Addition,
                FusionScheme::CrossAttention => Fusion::CrossAttention {
                    ln_q: LayerNorm::new(i, "fuse_ln_q", c),
                    ln_kv: LayerNorm::new(i, "fuse_ln_kv", c),
                    attn: MultiHeadAttention::new(i, "fuse_attn", c, cfg.heads.max(1), false)?,
                    limit: cfg.attn_token_limit,
                },
            };
            Ok(Self {
                cfg: cfg.clone(),
                spatial,
                ffcm,
                fusion,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.g.shape(x)[1];
        if c != self.cfg.channels {
            return Err(Error::Shape(format!(
                "HMM built for {} channels got {c}",
                self.cfg.channels
            )));
        }
        let spa = self.spatial.forward(ctx, x)?;
        let fre = match &self.ffcm {
            Some(f) => Some(f.forward(ctx, x)?),
            None => None,
        };
        let delta = match (&self.fusion, fre) {
            (Fusion::ConcatConv(conv), Some(fre)) => {
                let cat = ctx.g.concat(&[spa, fre], 1);
                conv.forward(ctx, cat)
            }
            (Fusion::ConcatConv(conv), None) => conv.forward(ctx, spa),
            (Fusion::Addition, Some(fre)) => ctx.g.add(spa, fre),
            (Fusion::Addition, None) => spa,
            (Fusion::CrossAttention { ln_q, ln_kv, attn, limit }, Some(fre)) => {
                let q = ln_q.map(ctx, spa);
                let kv = ln_kv.map(ctx, fre);
                let a = attn.maps(ctx, q, kv, *limit)?;
                ctx.g.add(spa, a)
            }
            (Fusion::CrossAttention { .. }, None) => unreachable!("validated at construction"),
        };
        Ok(ctx.g.add(x, delta))
    }

    /// Whether fusion ends in a 1×1 projection.
    pub fn has_fusion_projection(&self) -> bool {
        matches!(self.fusion, Fusion::ConcatConv(_))
    }
}
