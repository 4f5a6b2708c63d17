//! The U-shaped network: HMM encoder stages, an HMM bottleneck and HMM + PFI
//! decoder stages predicting a rain residual.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{config_err, Error, Result};
use crate::hmm::{FusionScheme, Hmm, HmmConfig};
use crate::nn::{Conv1x1, Conv2d, Ctx, Init, ParamStore};
use crate::pfi::{Pfi, PfiConfig, PriorFusion, TextQueryMode};
use crate::priors::{broadcast_tokens, ClipAdapter, DinoAdapter, PriorBundle, RawBatchPriors};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vssm::VssmConfig;

/// Every architectural hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub stage_depths: Vec<usize>,
    /// Per-stage widths; empty derives `C·2^min(i, n-1-i)`.
    pub channel_plan: Vec<usize>,
    pub heads: Vec<usize>,
    pub dw_kernel: usize,
    pub ffcm_enabled: bool,
    pub dw_enabled: bool,
    pub branch_fusion: FusionScheme,
    pub d_state: usize,
    pub vssm_expand: usize,
    /// `0` picks `ceil(width / 16)`.
    pub dt_rank: usize,
    pub spectral_expand: usize,
    pub inject_visual: bool,
    pub inject_text: bool,
    pub priors_fusion: PriorFusion,
    pub text_query_mode: TextQueryMode,
    pub gdfn_expansion: f64,
    pub attn_token_limit: usize,
    pub clip_bottleneck: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub prior_provider: String,
    pub prompt: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            stage_depths: vec![4, 6, 8, 6, 4],
            channel_plan: Vec::new(),
            heads: vec![1, 2, 4, 2, 1],
            dw_kernel: 3,
            ffcm_enabled: true,
            dw_enabled: true,
            branch_fusion: FusionScheme::ConcatConv,
            d_state: 8,
            vssm_expand: 1,
            dt_rank: 0,
            spectral_expand: 4,
            inject_visual: true,
            inject_text: true,
            priors_fusion: PriorFusion::Hierarchical,
            text_query_mode: TextQueryMode::TextQueries,
            gdfn_expansion: 2.66,
            attn_token_limit: 4096,
            clip_bottleneck: 128,
            visual_dim: crate::priors::VISUAL_DIM,
            text_dim: crate::priors::TEXT_DIM,
            prior_provider: "mock".into(),
            prompt: crate::priors::DEFAULT_PROMPT.into(),
        }
    }
}

impl ModelConfig {
    /// `C = 8`, one block per stage.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            stage_depths: vec![1; 5],
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    pub fn num_down(&self) -> usize {
        self.stage_depths.len() / 2
    }

    /// Spatial multiple the input is padded to.
    pub fn pad_multiple(&self) -> usize {
        1 << self.num_down()
    }

    pub fn plan(&self) -> Vec<usize> {
        if !self.channel_plan.is_empty() {
            return self.channel_plan.clone();
        }
        let n = self.num_stages();
        (0..n).map(|i| self.base_channels << i.min(n - 1 - i)).collect()
    }

    /// Downsampling level of stage `i`.
    pub fn level(&self, i: usize) -> usize {
        i.min(self.num_stages() - 1 - i)
    }

    /// Stages that carry a PFI block: bottleneck and decoder, in forward order.
    pub fn pfi_stages(&self) -> std::ops::Range<usize> {
        self.num_down()..self.num_stages()
    }

    /// Prior stage widths, finest first.
    pub fn prior_channels(&self) -> Vec<usize> {
        let plan = self.plan();
        self.pfi_stages().rev().map(|s| plan[s]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages();
        if n == 0 || n % 2 == 0 {
            return config_err(format!("stage_depths must have odd length, got {n}"));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return config_err("every stage needs at least one block");
        }
        if self.heads.len() != n {
            return config_err(format!("heads has {} entries for {n} stages", self.heads.len()));
        }
        let plan = self.plan();
        if plan.len() != n {
            return config_err(format!("channel_plan has {} entries for {n} stages", plan.len()));
        }
        for i in 0..n {
            if plan[i] != plan[n - 1 - i] {
                return config_err(format!("channel_plan {plan:?} is not symmetric"));
            }
            if plan[i] == 0 || plan[i] % 4 != 0 {
                return config_err(format!("stage {i} width {} not divisible by 4", plan[i]));
            }
            if self.heads[i] == 0 || plan[i] % self.heads[i] != 0 {
                return config_err(format!(
                    "stage {i}: {} heads do not divide {} channels",
                    self.heads[i], plan[i]
                ));
            }
        }
        if self.clip_bottleneck == 0 || self.visual_dim == 0 || self.text_dim == 0 {
            return config_err("prior dims must be positive");
        }
        if self.prompt.is_empty() && self.inject_text {
            return config_err("text prompt must not be empty");
        }
        for i in 0..n {
            self.hmm_config(i).validate()?;
            self.pfi_config(i).validate()?;
        }
        Ok(())
    }

    pub fn hmm_config(&self, stage: usize) -> HmmConfig {
        let plan = self.plan();
        HmmConfig {
            channels: plan[stage],
            dw_kernel: self.dw_kernel,
            ffcm_enabled: self.ffcm_enabled,
            dw_enabled: self.dw_enabled,
            fusion_scheme: self.branch_fusion,
            vssm: VssmConfig {
                d_state: self.d_state,
                expand: self.vssm_expand,
                dt_rank: self.dt_rank,
            },
            spectral_expand: self.spectral_expand,
            heads: self.heads[stage],
            attn_token_limit: self.attn_token_limit,
        }
    }

    pub fn pfi_config(&self, stage: usize) -> PfiConfig {
        PfiConfig {
            channels: self.plan()[stage],
            heads: self.heads[stage],
            inject_visual: self.inject_visual,
            inject_text: self.inject_text,
            fusion_scheme: self.priors_fusion,
            text_query_mode: self.text_query_mode,
            gdfn_expansion: self.gdfn_expansion,
            attn_token_limit: self.attn_token_limit,
        }
    }

    /// First field whose value differs from `other`, by serialized name.
    pub fn first_difference(&self, other: &Self) -> Option<String> {
        let a = serde_json::to_value(self).ok()?;
        let b = serde_json::to_value(other).ok()?;
        let (a, b) = (a.as_object()?, b.as_object()?);
        a.iter().find(|(k, v)| b.get(*k) != Some(*v)).map(|(k, _)| k.clone())
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    up: Conv2d,
    fuse: Conv1x1,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Restored image `I_rain − R`, clamped to `[0, 1]` outside training.
    pub pred: Var,
    /// Predicted rain layer `R`, cropped to the input size.
    pub residual: Var,
}

#[derive(Debug, Clone)]
pub struct Mphm {
    pub cfg: ModelConfig,
    embed: Conv2d,
    stages: Vec<Vec<Hmm>>,
    downs: Vec<Conv2d>,
    decoders: Vec<Decoder>,
    pfis: Vec<Pfi>,
    pub out: Conv2d,
    pub dino: Option<DinoAdapter>,
    pub clip: Option<ClipAdapter>,
}

/// Activation names recorded by [`Ctx::with_recording`].
pub fn hook_names(cfg: &ModelConfig) -> Vec<String> {
    let nd = cfg.num_down();
    let mut v = vec!["embed".to_string()];
    v.extend((0..nd).map(|i| format!("enc{i}")));
    v.push("bottleneck".into());
    v.extend((0..nd).map(|i| format!("dec{i}")));
    v
}

impl Mphm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.plan();
        let n = cfg.num_stages();
        let nd = cfg.num_down();
        let embed = Conv2d::new(init, "embed", 3, plan[0], 3, 1);
        let mut stages = Vec::with_capacity(n);
        let mut downs = Vec::new();
        let mut decoders = Vec::new();
        let mut pfis = Vec::new();
        for s in 0..n {
            if s > nd {
                decoders.push(init.scope(format!("up{}", s - nd - 1), |i| Decoder {
                    up: Conv2d::new(i, "conv", plan[s - 1], 4 * plan[s], 3, 1),
                    fuse: Conv1x1::new(i, "fuse", 2 * plan[s], plan[s], true),
                }));
            }
            let hcfg = cfg.hmm_config(s);
            let blocks = (0..cfg.stage_depths[s])
                .map(|b| Hmm::new(init, &format!("stage{s}.hmm{b}"), &hcfg))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            if s < nd {
                downs.push(Conv2d::new(init, &format!("down{s}"), plan[s], plan[s + 1], 3, 2));
            }
            if s >= nd {
                pfis.push(Pfi::new(init, &format!("stage{s}.pfi"), &cfg.pfi_config(s))?);
            }
        }
        let out = Conv2d::zeroed(init, "out", plan[n - 1], 3, 3);
        let prior_ch = cfg.prior_channels();
        let dino = if cfg.inject_visual {
            Some(DinoAdapter::new(init, "dino_adapter", cfg.visual_dim, &prior_ch)?)
        } else {
            None
        };
        let clip = cfg
            .inject_text
            .then(|| ClipAdapter::new(init, "clip_adapter", cfg.text_dim, cfg.clip_bottleneck, &prior_ch));
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            stages,
            downs,
            decoders,
            pfis,
            out,
            dino,
            clip,
        })
    }

    /// Fresh model and parameters from `seed`.
    pub fn build<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut Init::new(&mut store, seed), cfg)?;
        Ok((model, store))
    }

    /// `(c, h, w)` of each prior stage, finest first, for a padded input.
    pub fn prior_stage_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        let plan = self.cfg.plan();
        self.cfg
            .pfi_stages()
            .rev()
            .map(|s| {
                let f = 1 << self.cfg.level(s);
                (plan[s], h / f, w / f)
            })
            .collect()
    }

    /// Run the adapters on raw encoder outputs.
    pub fn adapt_priors<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        raw: &RawBatchPriors<T>,
        batch: usize,
        h: usize,
        w: usize,
    ) -> Result<PriorBundle> {
        let shapes = self.prior_stage_shapes(h, w);
        let p_v = match (&self.dino, &raw.visual) {
            (Some(a), Some(t)) => {
                if t.shape()[0] != batch {
                    return config_err(format!("{} visual priors for a batch of {batch}", t.shape()[0]));
                }
                let v = ctx.input(t.clone());
                Some(a.forward(ctx, v, &shapes)?)
            }
            (Some(_), None) => return config_err("visual injection is enabled but no visual prior was given"),
            _ => None,
        };
        let p_t = match (&self.clip, &raw.text) {
            (Some(a), Some(t)) => {
                let v = ctx.input(t.clone());
                let per_stage = a.forward(ctx, v)?;
                Some(per_stage.into_iter().map(|p| broadcast_tokens(ctx, p, batch)).collect())
            }
            (Some(_), None) => return config_err("text injection is enabled but no text prior was given"),
            _ => None,
        };
        Ok(PriorBundle { p_v, p_t })
    }

    fn check_finite<T: Scalar>(ctx: &Ctx<'_, T>, v: Var, stage: usize) -> Result<()> {
        match ctx.g.value(v).first_non_finite() {
            Some(index) => Err(Error::NonFinite {
                context: format!("stage {stage}"),
                index,
            }),
            None => Ok(()),
        }
    }

    /// Full forward pass on `rain`: `[B, 3, H, W]`.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        rain: Var,
        priors: &RawBatchPriors<T>,
    ) -> Result<ForwardOutput> {
        let (b, c, h, w) = ctx.g.value(rain).dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        let m = self.cfg.pad_multiple();
        let (ph, pw) = (h.div_ceil(m) * m - h, w.div_ceil(m) * m - w);
        let x_in = ctx.g.pad_reflect_br(rain, ph, pw);
        let (hp, wp) = (h + ph, w + pw);
        let bundle = self.adapt_priors(ctx, priors, b, hp, wp)?;
        // prior lists are finest first; PFI stages run coarsest first
        let n_pfi = self.pfis.len();
        let prior_at = |list: &Option<Vec<Var>>, k: usize| list.as_ref().map(|l| l[n_pfi - 1 - k]);

        let nd = self.cfg.num_down();
        let mut x = self.embed.forward(ctx, x_in);
        ctx.hook("embed", x);
        let mut skips = Vec::with_capacity(nd);
        for s in 0..self.stages.len() {
            if s > nd {
                let j = s - nd - 1;
                let dec = &self.decoders[j];
                let up = dec.up.forward(ctx, x);
                let up = ctx.g.pixel_shuffle(up, 2)?;
                let skip: Var = skips[nd - 1 - j];
                let cat = ctx.g.concat(&[up, skip], 1);
                x = dec.fuse.forward(ctx, cat);
            }
            for blk in &self.stages[s] {
                x = blk.forward(ctx, x)?;
            }
            if s >= nd {
                let k = s - nd;
                x = self.pfis[k].forward(ctx, x, prior_at(&bundle.p_v, k), prior_at(&bundle.p_t, k))?;
            }
            Self::check_finite(ctx, x, s)?;
            match s.cmp(&nd) {
                std::cmp::Ordering::Less => {
                    ctx.hook(&format!("enc{s}"), x);
                    skips.push(x);
                    x = self.downs[s].forward(ctx, x);
                }
                std::cmp::Ordering::Equal => ctx.hook("bottleneck", x),
                std::cmp::Ordering::Greater => ctx.hook(&format!("dec{}", s - nd - 1), x),
            }
        }
        let r = self.out.forward(ctx, x);
        let r = ctx.g.crop(r, h, w);
        let pred = ctx.g.sub(rain, r);
        let pred = if ctx.training() {
            pred
        } else {
            ctx.g.clamp(pred, T::zero(), T::one())
        };
        Ok(ForwardOutput { pred, residual: r })
    }

    /// Inference-mode restoration of a `[B, 3, H, W]` batch.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        rain: &Tensor<T>,
        priors: &RawBatchPriors<T>,
    ) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(store, false);
        let x = ctx.input(rain.clone());
        let out = self.forward(&mut ctx, x, priors)?;
        Ok(ctx.g.value(out.pred).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_is_symmetric_doubling() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.plan(), vec![32, 64, 128, 64, 32]);
        assert_eq!(cfg.prior_channels(), vec![32, 64, 128]);
        assert_eq!(cfg.pad_multiple(), 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let even = ModelConfig {
            stage_depths: vec![1, 1, 1, 1],
            ..ModelConfig::tiny()
        };
        assert!(matches!(even.validate(), Err(Error::Config(_))));
        let asym = ModelConfig {
            channel_plan: vec![8, 16, 32, 16, 12],
            ..ModelConfig::tiny()
        };
        assert!(matches!(asym.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn first_difference_names_the_field() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            channel_plan: vec![32, 64, 96, 64, 32],
            ..a.clone()
        };
        assert_eq!(a.first_difference(&b).as_deref(), Some("channel_plan"));
        assert_eq!(a.first_difference(&a), None);
    }
}
