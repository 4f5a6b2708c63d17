//! Priors Fusion Injection: visual then textual prior injection, followed by
//! self-attention and a gated depthwise feedforward network.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{pooled_dims, Conv1x1, Ctx, DwConv, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::scalar::Scalar;

/// How the two priors enter the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorFusion {
    #[default]
    Hierarchical,
    Addition,
    Concat,
    JointCrossAttention,
}

impl std::str::FromStr for PriorFusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(Self::Hierarchical),
            "addition" => Ok(Self::Addition),
            "concat" => Ok(Self::Concat),
            "joint_cross_attention" => Ok(Self::JointCrossAttention),
            _ => config_err(format!("unknown priors fusion scheme `{s}`")),
        }
    }
}

/// Which side supplies the queries in text injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextQueryMode {
    /// Text tokens query the image tokens; the pooled answer modulates `F`.
    #[default]
    TextQueries,
    /// Image tokens query the text tokens.
    FeatureQueries,
}

impl std::str::FromStr for TextQueryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_queries" => Ok(Self::TextQueries),
            "feature_queries" => Ok(Self::FeatureQueries),
            _ => config_err(format!("unknown text query mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfiConfig {
    pub channels: usize,
    pub heads: usize,
    pub inject_visual: bool,
    pub inject_text: bool,
    pub fusion_scheme: PriorFusion,
    pub text_query_mode: TextQueryMode,
    pub gdfn_expansion: f64,
    pub attn_token_limit: usize,
}

impl PfiConfig {
    pub fn new(channels: usize, heads: usize) -> Self {
        Self {
            channels,
            heads,
            inject_visual: true,
            inject_text: true,
            fusion_scheme: PriorFusion::Hierarchical,
            text_query_mode: TextQueryMode::TextQueries,
            gdfn_expansion: 2.66,
            attn_token_limit: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return config_err(format!("{} heads do not divide {} channels", self.heads, self.channels));
        }
        if !(self.gdfn_expansion > 0.0) {
            return config_err("gdfn_expansion must be positive");
        }
        if self.attn_token_limit == 0 {
            return config_err("attn_token_limit must be positive");
        }
        Ok(())
    }

    pub fn gdfn_hidden(&self) -> usize {
        ((self.channels as f64 * self.gdfn_expansion) as usize).max(1)
    }
}

/// Tokens of a map after the pooling guard, with the pooled grid size.
fn guarded_tokens<T: Scalar>(ctx: &mut Ctx<'_, T>, map: Var, limit: usize) -> (Var, usize, usize) {
    let s = ctx.g.shape(map).to_vec();
    let (ph, pw) = pooled_dims(s[2], s[3], limit);
    let pooled = ctx.g.adaptive_avg_pool(map, ph, pw);
    (ctx.g.to_tokens(pooled), ph, pw)
}

/// Map queries against arbitrary key/value tokens, returned at map resolution.
fn map_queries<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    attn: &MultiHeadAttention,
    q_map: Var,
    kv: Var,
    limit: usize,
) -> Result<Var> {
    let s = ctx.g.shape(q_map).to_vec();
    let (q, ph, pw) = guarded_tokens(ctx, q_map, limit);
    let out = attn.tokens(ctx, q, kv)?;
    let out = ctx.g.from_tokens(out, ph, pw);
    Ok(ctx.g.bilinear_resize(out, s[2], s[3]))
}

/// Mean over the token axis: `[B, N, C] -> [B, C]`.
fn mean_tokens<T: Scalar>(ctx: &mut Ctx<'_, T>, t: Var) -> Var {
    let p = ctx.g.permute(t, &[0, 2, 1]);
    ctx.g.mean_spatial(p)
}

#[derive(Debug, Clone)]
pub struct VisualInjection {
    ln_f: LayerNorm,
    ln_p: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl VisualInjection {
    fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, heads: usize) -> Result<Self> {
        init.scope("inject_v", |i| {
            Ok(Self {
                ln_f: LayerNorm::new(i, "ln_f", c),
                ln_p: LayerNorm::new(i, "ln_p", c),
                attn: MultiHeadAttention::new(i, "attn", c, heads, true)?,
            })
        })
    }

    /// `F + Attn(q = F, kv = P_v)`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: Var, p_v: Var, limit: usize) -> Result<Var> {
        let q = self.ln_f.map(ctx, f);
        let kv = self.ln_p.map(ctx, p_v);
        let a = self.attn.maps(ctx, q, kv, limit)?;
        Ok(ctx.g.add(f, a))
    }
}

#[derive(Debug, Clone)]
pub struct TextInjection {
    mode: TextQueryMode,
    ln_f: LayerNorm,
    ln_t: LayerNorm,
    pub attn: MultiHeadAttention,
    /// `c -> 2c` (scale, shift); only in text-query mode.
    modulation: Option<Linear>,
}

impl TextInjection {
    fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, heads: usize, mode: TextQueryMode) -> Result<Self> {
        init.scope("inject_t", |i| {
            let text_q = mode == TextQueryMode::TextQueries;
            Ok(Self {
                mode,
                ln_f: LayerNorm::new(i, "ln_f", c),
                ln_t: LayerNorm::new(i, "ln_t", c),
                attn: MultiHeadAttention::new(i, "attn", c, heads, !text_q)?,
                modulation: text_q.then(|| Linear::zeroed(i, "modulation", c, 2 * c, true)),
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: Var, p_t: Var, limit: usize) -> Result<Var> {
        let fn_ = self.ln_f.map(ctx, f);
        let t = self.ln_t.tokens(ctx, p_t);
        match (self.mode, &self.modulation) {
            (TextQueryMode::TextQueries, Some(modulation)) => {
                let c = ctx.g.shape(f)[1];
                let (kv, _, _) = guarded_tokens(ctx, fn_, limit);
                let answer = self.attn.tokens(ctx, t, kv)?;
                let desc = mean_tokens(ctx, answer);
                let m = modulation.forward(ctx, desc);
                let parts = ctx.g.split(m, 1, &[c, c]);
                let scaled = ctx.g.mul_bc(f, parts[0]);
                let y = ctx.g.add(f, scaled);
                Ok(ctx.g.add_bc(y, parts[1]))
            }
            _ => {
                let a = map_queries(ctx, &self.attn, fn_, t, limit)?;
                Ok(ctx.g.add(f, a))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    ln: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl SelfAttention {
    fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, heads: usize) -> Result<Self> {
        init.scope("self_attn", |i| {
            Ok(Self {
                ln: LayerNorm::new(i, "ln", c),
                attn: MultiHeadAttention::new(i, "attn", c, heads, true)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: Var, limit: usize) -> Result<Var> {
        let x = self.ln.map(ctx, f);
        let a = self.attn.maps(ctx, x, x, limit)?;
        Ok(ctx.g.add(f, a))
    }
}

/// Gated depthwise feedforward: `F + W_o(GELU(D₁W₁ LN F) ⊙ D₂W₂ LN F)`.
#[derive(Debug, Clone)]
pub struct Gdfn {
    pub hidden: usize,
    pub ln: LayerNorm,
    pub pw_in: Conv1x1,
    pub dw: DwConv,
    pub pw_out: Conv1x1,
}

impl Gdfn {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize, hidden: usize) -> Result<Self> {
        init.scope(name, |i| {
            Ok(Self {
                hidden,
                ln: LayerNorm::new(i, "ln", c),
                pw_in: Conv1x1::new(i, "pw_in", c, 2 * hidden, false),
                dw: DwConv::new(i, "dw", 2 * hidden, 3, false)?,
                pw_out: Conv1x1::zeroed(i, "pw_out", hidden, c, false),
            })
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let x = self.ln.map(ctx, f);
        let x = self.pw_in.forward(ctx, x);
        let x = self.dw.forward(ctx, x)?;
        let parts = ctx.g.split(x, 1, &[self.hidden, self.hidden]);
        let gate = ctx.g.gelu(parts[0]);
        let y = ctx.g.mul(gate, parts[1]);
        let y = self.pw_out.forward(ctx, y);
        Ok(ctx.g.add(f, y))
    }
}

#[derive(Debug, Clone)]
enum Injection {
    Hierarchical {
        visual: Option<VisualInjection>,
        text: Option<TextInjection>,
    },
    Addition {
        proj_v: Option<Conv1x1>,
        proj_t: Option<Linear>,
    },
    Concat(Conv1x1),
    Joint {
        ln_f: LayerNorm,
        ln_v: LayerNorm,
        ln_t: LayerNorm,
        attn: MultiHeadAttention,
    },
}

#[derive(Debug, Clone)]
pub struct Pfi {
    pub cfg: PfiConfig,
    pub self_attn: SelfAttention,
    pub gdfn: Gdfn,
    injection: Injection,
}

impl Pfi {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &PfiConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, heads) = (cfg.channels, cfg.heads);
        let (use_v, use_t) = (cfg.inject_visual, cfg.inject_text);
        init.scope(name, |i| {
            let self_attn = SelfAttention::new(i, c, heads)?;
            let gdfn = Gdfn::new(i, "gdfn", c, cfg.gdfn_hidden())?;
            let injection = match cfg.fusion_scheme {
                PriorFusion::Hierarchical => Injection::Hierarchical {
                    visual: if use_v { Some(VisualInjection::new(i, c, heads)?) } else { None },
                    text: if use_t {
                        Some(TextInjection::new(i, c, heads, cfg.text_query_mode)?)
                    } else {
                        None
                    },
                },
                PriorFusion::Addition => Injection::Addition {
                    proj_v: use_v.then(|| Conv1x1::zeroed(i, "add_v", c, c, true)),
                    proj_t: use_t.then(|| Linear::zeroed(i, "add_t", c, c, true)),
                },
                PriorFusion::Concat => {
                    let k = 1 + usize::from(use_v) + usize::from(use_t);
                    Injection::Concat(Conv1x1::zeroed(i, "concat", k * c, c, true))
                }
                PriorFusion::JointCrossAttention => Injection::Joint {
                    ln_f: LayerNorm::new(i, "joint_ln_f", c),
                    ln_v: LayerNorm::new(i, "joint_ln_v", c),
                    ln_t: LayerNorm::new(i, "joint_ln_t", c),
                    attn: MultiHeadAttention::new(i, "joint_attn", c, heads, true)?,
                },
            };
            Ok(Self {
                cfg: cfg.clone(),
                self_attn,
                gdfn,
                injection,
            })
        })
    }

    fn check_priors<T: Scalar>(&self, ctx: &Ctx<'_, T>, f: Var, p_v: Option<Var>, p_t: Option<Var>) -> Result<()> {
        let fs = ctx.g.shape(f);
        if self.cfg.inject_visual {
            let Some(p) = p_v else {
                return config_err("visual injection is enabled but no visual prior was given");
            };
            if ctx.g.shape(p) != fs {
                return shape_err(format!(
                    "visual prior {:?} does not match stage features {:?}",
                    ctx.g.shape(p),
                    fs
                ));
            }
        }
        if self.cfg.inject_text {
            let Some(p) = p_t else {
                return config_err("text injection is enabled but no text prior was given");
            };
            let ps = ctx.g.shape(p);
            if ps.len() != 3 || ps[0] != fs[0] || ps[2] != fs[1] {
                return shape_err(format!("text prior {ps:?} does not fit stage features {fs:?}"));
            }
        }
        Ok(())
    }

    /// Prior injection only, without self-attention and GDFN.
    pub fn inject<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: Var, p_v: Option<Var>, p_t: Option<Var>) -> Result<Var> {
        self.check_priors(ctx, f, p_v, p_t)?;
        let limit = self.cfg.attn_token_limit;
        let p_v = p_v.filter(|_| self.cfg.inject_visual);
        let p_t = p_t.filter(|_| self.cfg.inject_text);
        match &self.injection {
            Injection::Hierarchical { visual, text } => {
                let mut x = f;
                if let (Some(m), Some(p)) = (visual, p_v) {
                    x = m.forward(ctx, x, p, limit)?;
                }
                if let (Some(m), Some(p)) = (text, p_t) {
                    x = m.forward(ctx, x, p, limit)?;
                }
                Ok(x)
            }
            Injection::Addition { proj_v, proj_t } => {
                let mut x = f;
                if let (Some(m), Some(p)) = (proj_v, p_v) {
                    let v = m.forward(ctx, p);
                    x = ctx.g.add(x, v);
                }
                if let (Some(m), Some(p)) = (proj_t, p_t) {
                    let t = m.forward(ctx, p);
                    let t = mean_tokens(ctx, t);
                    x = ctx.g.add_bc(x, t);
                }
                Ok(x)
            }
            Injection::Concat(conv) => {
                let s = ctx.g.shape(f).to_vec();
                let mut parts = vec![f];
                if let Some(p) = p_v {
                    parts.push(p);
                }
                if let Some(p) = p_t {
                    let t = mean_tokens(ctx, p);
                    parts.push(ctx.g.broadcast_spatial(t, s[2], s[3]));
                }
                let cat = ctx.g.concat(&parts, 1);
                let d = conv.forward(ctx, cat);
                Ok(ctx.g.add(f, d))
            }
            Injection::Joint { ln_f, ln_v, ln_t, attn } => {
                let mut kv = Vec::new();
                if let Some(p) = p_v {
                    let pn = ln_v.map(ctx, p);
                    kv.push(guarded_tokens(ctx, pn, limit).0);
                }
                if let Some(p) = p_t {
                    kv.push(ln_t.tokens(ctx, p));
                }
                if kv.is_empty() {
                    return Ok(f);
                }
                let kv = ctx.g.concat(&kv, 1);
                let q = ln_f.map(ctx, f);
                let a = map_queries(ctx, attn, q, kv, limit)?;
                Ok(ctx.g.add(f, a))
            }
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: Var, p_v: Option<Var>, p_t: Option<Var>) -> Result<Var> {
        let x = self.inject(ctx, f, p_v, p_t)?;
        let x = self.self_attn.forward(ctx, x, self.cfg.attn_token_limit)?;
        self.gdfn.forward(ctx, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_init_block_is_identity() {
        let cfg = PfiConfig::new(8, 2);
        let mut store = ParamStore::<f64>::new();
        let pfi = Pfi::new(&mut Init::new(&mut store, 1), "pfi", &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ft = Tensor::randn(&[2, 8, 6, 6], 1.0, &mut rng);
        let mut ctx = Ctx::new(&store, false);
        let f = ctx.input(ft.clone());
        let pv = ctx.input(Tensor::randn(&[2, 8, 6, 6], 1.0, &mut rng));
        let pt = ctx.input(Tensor::randn(&[2, 1, 8], 1.0, &mut rng));
        let y = pfi.forward(&mut ctx, f, Some(pv), Some(pt)).unwrap();
        assert_eq!(ctx.g.value(y), &ft);
    }

    #[test]
    fn missing_enabled_prior_is_a_config_error() {
        let cfg = PfiConfig::new(8, 2);
        let mut store = ParamStore::<f32>::new();
        let pfi = Pfi::new(&mut Init::new(&mut store, 1), "pfi", &cfg).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let f = ctx.input(Tensor::ones(&[1, 8, 4, 4]));
        assert!(matches!(pfi.forward(&mut ctx, f, None, None), Err(Error::Config(_))));
    }
}
