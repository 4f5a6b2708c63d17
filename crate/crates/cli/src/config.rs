//! Run configuration: one flat TOML document covering the model, the loss,
//! the optimizer and the run itself.
//!
//! Precedence, lowest first: built-in defaults, the config file, `MPHM_SEED`,
//! then `--set key=value` flags in the order given.

use std::path::{Path, PathBuf};

use mphm_core::loss::LossConfig;
use mphm_core::optim::AdamConfig;
use mphm_core::train::TrainOptions;
use mphm_core::ModelConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "MPHM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: 1e-3,
            lr_min: 1e-5,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            clip_norm: 1.0,
        }
    }
}

/// Budget, data and output settings. Empty strings mean "unset".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub steps: u64,
    pub batch: usize,
    pub crop: usize,
    pub augment: bool,
    pub seed: u64,
    pub data_dir: String,
    pub data_seed: u64,
    pub synthetic_pairs: usize,
    pub synthetic_size: usize,
    pub eval_data_dir: String,
    pub eval_pairs: usize,
    pub out_dir: String,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub eval_every: u64,
    pub feature_dir: String,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 4,
            crop: 256,
            augment: true,
            seed: 0,
            data_dir: String::new(),
            data_seed: 0,
            synthetic_pairs: 16,
            synthetic_size: 256,
            eval_data_dir: String::new(),
            eval_pairs: 8,
            out_dir: "runs/mphm".into(),
            checkpoint_every: 100,
            log_every: 10,
            eval_every: 0,
            feature_dir: String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub run: RunSettings,
}

const SECTIONS: [&str; 4] = ["model", "loss", "optimizer", "run"];

const DOCS: &[(&str, &str)] = &[
    ("base_channels", "base width C"),
    ("stage_depths", "HMM blocks per stage; odd length: encoder, bottleneck, decoder"),
    ("channel_plan", "per-stage widths; empty derives C * 2^level"),
    ("heads", "attention heads per stage"),
    ("dw_kernel", "depthwise kernel size in the spatial branch (odd)"),
    ("ffcm_enabled", "frequency branch"),
    ("dw_enabled", "depthwise convs on the spatial channel groups"),
    ("branch_fusion", "concat_conv | addition | cross_attention"),
    ("d_state", "selective-scan state size"),
    ("vssm_expand", "VSSM inner expansion"),
    ("dt_rank", "step-size projection rank; 0 picks ceil(width / 16)"),
    ("spectral_expand", "hidden expansion of the spectral MLP"),
    ("inject_visual", "inject the visual prior P_v"),
    ("inject_text", "inject the text prior P_t"),
    ("priors_fusion", "hierarchical | addition | concat | joint_cross_attention"),
    ("text_query_mode", "text_queries | feature_queries"),
    ("gdfn_expansion", "GDFN hidden expansion"),
    ("attn_token_limit", "attention above this many tokens runs on pooled maps"),
    ("clip_bottleneck", "CLIP adapter bottleneck width"),
    ("visual_dim", "visual token width of the prior provider"),
    ("text_dim", "text token width of the prior provider"),
    ("prior_provider", "mock | external"),
    ("prompt", "text prompt for the text prior"),
    ("lambda_fcr", "weight of the frequency contrastive term"),
    ("n_negatives", "negatives per sample in the contrastive term"),
    ("epsilon", "denominator guard of the contrastive ratio"),
    ("lr", "initial learning rate"),
    ("lr_min", "final learning rate of the cosine schedule"),
    ("beta1", "Adam beta1"),
    ("beta2", "Adam beta2"),
    ("adam_eps", "Adam epsilon"),
    ("clip_norm", "global gradient-norm clip"),
    ("steps", "optimizer steps"),
    ("batch", "batch size"),
    ("crop", "square training crop; 0 keeps full images"),
    ("augment", "random crops and flips during training"),
    ("seed", "model init, batch order and negatives; MPHM_SEED overrides"),
    ("data_dir", "paired root with rain/ and norain/; empty uses synthetic pairs"),
    ("data_seed", "seed of the synthetic training pairs"),
    ("synthetic_pairs", "number of synthetic training pairs"),
    ("synthetic_size", "side of the synthetic images"),
    ("eval_data_dir", "paired root for evaluation; empty uses held-out synthetic pairs"),
    ("eval_pairs", "number of held-out synthetic evaluation pairs"),
    ("out_dir", "checkpoint and log directory"),
    ("checkpoint_every", "steps between checkpoints; 0 saves only at the end"),
    ("log_every", "steps between progress log lines"),
    ("eval_every", "steps between evaluation rows; 0 disables"),
    ("feature_dir", "precomputed feature files for the external provider"),
];

fn table_of<S: Serialize>(s: &S) -> Table {
    match Value::try_from(s).expect("config sections serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config sections are structs"),
    }
}

fn from_table<S: for<'de> Deserialize<'de>>(t: Table, section: &str) -> Result<S> {
    Value::Table(t)
        .try_into()
        .map_err(|e| CliError::Config(format!("{section} settings: {e}")))
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl RunConfig {
    fn sections(&self) -> [Table; 4] {
        [
            table_of(&self.model),
            table_of(&self.loss),
            table_of(&self.optim),
            table_of(&self.run),
        ]
    }

    /// Every key with its value, in documented order.
    pub fn to_flat(&self) -> Table {
        self.sections().into_iter().flatten().collect()
    }

    /// Builds a config from flat keys; absent keys keep their defaults.
    pub fn from_flat(flat: &Table) -> Result<Self> {
        let mut sections = Self::default().sections();
        for (k, v) in flat {
            let Some(sec) = sections.iter_mut().find(|s| s.contains_key(k)) else {
                return Err(CliError::Config(format!("unknown key `{k}`")));
            };
            let v = match (&sec[k], v) {
                (Value::Float(_), Value::Integer(i)) => Value::Float(*i as f64),
                (_, Value::Table(_)) => return Err(CliError::Config(format!("key `{k}`: nested tables are not allowed"))),
                _ => v.clone(),
            };
            sec.insert(k.clone(), v);
        }
        let [m, l, o, r] = sections;
        Ok(Self {
            model: from_table(m, SECTIONS[0])?,
            loss: from_table(l, SECTIONS[1])?,
            optim: from_table(o, SECTIONS[2])?,
            run: from_table(r, SECTIONS[3])?,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let t: Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Self::from_flat(&t)
    }

    /// Defaults, then `file`, then `env_seed`, then each `key=value` in `sets`.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, sets: &[String]) -> Result<Self> {
        let mut flat = Table::new();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            let t: Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            flat.extend(t);
        }
        if let Some(s) = env_seed {
            let seed: i64 = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not a seed")))?;
            flat.insert("seed".into(), Value::Integer(seed));
        }
        for s in sets {
            let Some((k, v)) = s.split_once('=') else {
                return Err(CliError::Config(format!("--set expects key=value, got {s:?}")));
            };
            flat.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg = Self::from_flat(&flat)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`RunConfig::resolve`] with the seed taken from the environment.
    pub fn resolve_env(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(file, env.as_deref(), sets)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let (o, r) = (&self.optim, &self.run);
        if !(o.lr > 0.0) || !(o.lr_min >= 0.0) || o.lr_min > o.lr {
            return Err(CliError::Config(format!("need 0 <= lr_min <= lr, got lr {} lr_min {}", o.lr, o.lr_min)));
        }
        if !(o.clip_norm > 0.0) {
            return Err(CliError::Config("clip_norm must be positive".into()));
        }
        if r.steps == 0 || r.batch == 0 {
            return Err(CliError::Config("steps and batch must be at least 1".into()));
        }
        if r.data_dir.is_empty() {
            if r.synthetic_pairs == 0 {
                return Err(CliError::Config("synthetic_pairs must be at least 1".into()));
            }
            if r.crop > r.synthetic_size {
                return Err(CliError::Config(format!(
                    "crop {} exceeds synthetic_size {}",
                    r.crop, r.synthetic_size
                )));
            }
        }
        if self.model.prior_provider == "external" && r.feature_dir.is_empty() {
            return Err(CliError::Config("prior_provider = \"external\" needs feature_dir".into()));
        }
        Ok(())
    }

    /// Keys whose values differ from `other`.
    pub fn diff_keys(&self, other: &Self) -> Vec<String> {
        let (a, b) = (self.to_flat(), other.to_flat());
        a.iter().filter(|(k, v)| b.get(*k) != Some(*v)).map(|(k, _)| k.clone()).collect()
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.run.steps,
            lr: self.optim.lr,
            lr_min: self.optim.lr_min,
            clip_norm: self.optim.clip_norm,
            loss: self.loss,
            adam: AdamConfig {
                beta1: self.optim.beta1,
                beta2: self.optim.beta2,
                eps: self.optim.adam_eps,
            },
            seed: self.run.seed,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.run.out_dir)
    }

    /// The config as a commented, flat TOML document.
    pub fn render(&self) -> String {
        let mut out = String::from("# MPHM run configuration. Every key is optional.\n");
        for (name, sec) in SECTIONS.iter().zip(self.sections()) {
            out.push_str(&format!("\n# ---- {name} ----\n"));
            for (k, v) in sec {
                if let Some((_, doc)) = DOCS.iter().find(|(d, _)| *d == k) {
                    out.push_str(&format!("# {doc}\n"));
                }
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}
