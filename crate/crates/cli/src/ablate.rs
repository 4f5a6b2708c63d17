//! Ablation sweeps: one trained and evaluated model per variant of one axis,
//! all sharing the seed, data and budget of the base config.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use log::info;
use mphm_core::complexity::count_params_flops;
use toml::Value;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{eval_set, evaluate_model, mean_row, provider, restore};
use crate::train::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    HmmBranches,
    BranchFusion,
    PriorInjection,
    PriorsFusion,
}

pub const AXES: [Axis; 4] = [Axis::HmmBranches, Axis::BranchFusion, Axis::PriorInjection, Axis::PriorsFusion];

impl FromStr for Axis {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        AXES.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = AXES.iter().map(|a| a.name()).collect();
            CliError::Config(format!("unknown ablation axis {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// One row of an ablation table: display label, directory slug, overrides.
pub struct Variant {
    pub label: &'static str,
    pub slug: &'static str,
    pub set: Vec<(&'static str, Value)>,
}

fn v(label: &'static str, slug: &'static str, set: Vec<(&'static str, Value)>) -> Variant {
    Variant { label, slug, set }
}

fn b(x: bool) -> Value {
    Value::Boolean(x)
}

fn s(x: &str) -> Value {
    Value::String(x.into())
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::HmmBranches => "hmm_branches",
            Axis::BranchFusion => "branch_fusion",
            Axis::PriorInjection => "prior_injection",
            Axis::PriorsFusion => "priors_fusion",
        }
    }

    /// Config keys the variants of this axis may change.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            Axis::HmmBranches => &["ffcm_enabled", "dw_enabled"],
            Axis::BranchFusion => &["branch_fusion"],
            Axis::PriorInjection => &["inject_visual", "inject_text"],
            Axis::PriorsFusion => &["priors_fusion"],
        }
    }

    pub fn variants(self) -> Vec<Variant> {
        match self {
            Axis::HmmBranches => vec![
                v("Model-1", "model1", vec![("ffcm_enabled", b(false)), ("dw_enabled", b(true))]),
                v("Model-2", "model2", vec![("ffcm_enabled", b(true)), ("dw_enabled", b(false))]),
                v("Ours", "full", vec![("ffcm_enabled", b(true)), ("dw_enabled", b(true))]),
            ],
            Axis::BranchFusion => vec![
                v("Addition", "addition", vec![("branch_fusion", s("addition"))]),
                v("Cross-attn", "cross_attention", vec![("branch_fusion", s("cross_attention"))]),
                v("Concat (Ours)", "concat_conv", vec![("branch_fusion", s("concat_conv"))]),
            ],
            Axis::PriorInjection => vec![
                v("w/o Priors", "none", vec![("inject_visual", b(false)), ("inject_text", b(false))]),
                v("w P_v", "visual", vec![("inject_visual", b(true)), ("inject_text", b(false))]),
                v("w P_t", "text", vec![("inject_visual", b(false)), ("inject_text", b(true))]),
                v("w P_v & P_t (Ours)", "both", vec![("inject_visual", b(true)), ("inject_text", b(true))]),
            ],
            Axis::PriorsFusion => vec![
                v("Addition", "addition", vec![("priors_fusion", s("addition"))]),
                v("Concat", "concat", vec![("priors_fusion", s("concat"))]),
                v("Cross-attention", "joint_cross_attention", vec![("priors_fusion", s("joint_cross_attention"))]),
                v("Hierarchical (Ours)", "hierarchical", vec![("priors_fusion", s("hierarchical"))]),
            ],
        }
    }
}

/// Variant configs, each checked to differ from `base` only along `axis`
/// (apart from the output directory).
pub fn variant_configs(base: &RunConfig, axis: Axis, out: &Path) -> Result<Vec<(Variant, RunConfig)>> {
    let mut res = Vec::new();
    for var in axis.variants() {
        let mut flat = base.to_flat();
        for (k, val) in &var.set {
            flat.insert((*k).into(), val.clone());
        }
        flat.insert("out_dir".into(), Value::String(out.join(var.slug).to_string_lossy().into_owned()));
        let cfg = RunConfig::from_flat(&flat)?;
        cfg.validate()?;
        let stray: Vec<String> = base
            .diff_keys(&cfg)
            .into_iter()
            .filter(|k| k != "out_dir" && !axis.keys().contains(&k.as_str()))
            .collect();
        if !stray.is_empty() {
            return Err(CliError::Config(format!("variant {} also changes {stray:?}", var.label)));
        }
        res.push((var, cfg));
    }
    Ok(res)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub settings: Vec<(String, String)>,
    pub psnr: f64,
    pub ssim: f64,
    /// Analytic counts at 256×256.
    pub params: u64,
    pub macs: u64,
    pub seed: u64,
    pub steps: u64,
}

/// Trains and evaluates every variant of `axis`, writing
/// `ablation_<axis>.csv` and `ablation_<axis>.md` into `out`.
pub fn ablate(base: &RunConfig, axis: Axis, out: &Path) -> Result<Vec<AblationRow>> {
    base.validate()?;
    std::fs::create_dir_all(out)?;
    info!("ablation {} with base config:\n{}", axis.name(), base.render());
    let eval_ds = eval_set(&base.run)?;
    let mut rows = Vec::new();
    for (var, cfg) in variant_configs(base, axis, out)? {
        info!("variant {} ({})", var.label, var.slug);
        let report = train(&cfg, false)?;
        let (model, store) = restore(&report.checkpoint, Some(&cfg.model))?;
        let prov = provider(&cfg.model, &cfg.run.feature_dir)?;
        let m = mean_row(&evaluate_model(&model, &store, prov.as_ref(), &eval_ds)?);
        let (params, macs) = count_params_flops(&cfg.model)?;
        info!("variant {}: psnr {:.3} ssim {:.4}", var.label, m.psnr, m.ssim);
        rows.push(AblationRow {
            variant: var.label.into(),
            settings: var.set.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            psnr: m.psnr,
            ssim: m.ssim,
            params,
            macs,
            seed: cfg.run.seed,
            steps: report.steps,
        });
    }
    write_tables(out, axis, &rows)?;
    Ok(rows)
}

fn write_tables(out: &Path, axis: Axis, rows: &[AblationRow]) -> Result<()> {
    let keys = axis.keys();
    let mut w = csv::Writer::from_path(out.join(format!("ablation_{}.csv", axis.name())))?;
    let mut header = vec!["variant".to_string()];
    header.extend(keys.iter().map(|k| k.to_string()));
    header.extend(["psnr", "ssim", "params", "macs", "seed", "steps"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.variant.clone()];
        for k in keys {
            rec.push(r.settings.iter().find(|(n, _)| n == k).map(|(_, v)| v.trim_matches('"').to_string()).unwrap_or_default());
        }
        rec.extend([
            format!("{:.4}", r.psnr),
            format!("{:.5}", r.ssim),
            r.params.to_string(),
            r.macs.to_string(),
            r.seed.to_string(),
            r.steps.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut md = String::new();
    let cols: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
    let _ = writeln!(md, "| Variant | {} | PSNR | SSIM | Params (M) | FLOPs (G) | Seed |", cols.join(" | "));
    let _ = writeln!(md, "|---|{}---|---|---|---|---|", "---|".repeat(cols.len()));
    for r in rows {
        let vals: Vec<String> = keys
            .iter()
            .map(|k| r.settings.iter().find(|(n, _)| n == k).map(|(_, v)| v.trim_matches('"').to_string()).unwrap_or_default())
            .collect();
        let _ = writeln!(
            md,
            "| {} | {} | {:.2} | {:.4} | {:.3} | {:.2} | {} |",
            r.variant,
            vals.join(" | "),
            r.psnr,
            r.ssim,
            r.params as f64 / 1e6,
            r.macs as f64 / 1e9,
            r.seed
        );
    }
    std::fs::write(out.join(format!("ablation_{}.md", axis.name())), md)?;
    Ok(())
}
