//! Pieces shared by the subcommands: providers, datasets, restoration and scoring.

use std::path::Path;

use mphm_core::checkpoint;
use mphm_core::image::Image;
use mphm_core::metrics::{psnr, ssim};
use mphm_core::nn::ParamStore;
use mphm_core::priors::{provider_registry, PriorProvider, ProviderOptions, RawBatchPriors};
use mphm_core::{ModelConfig, Mphm};
use mphm_data::scenes::synthetic_pairs;
use mphm_data::{load_paired_root, PairedDataset};

use crate::config::RunSettings;
use crate::error::{CliError, Result};

/// Seed of the mock encoders. Fixed so every subcommand sees the same frozen priors.
pub const PROVIDER_SEED: u64 = 0;
const HELD_OUT_SALT: u64 = 0x5EED_E7A1;

pub type Provider = Box<dyn PriorProvider<f32>>;

pub fn provider(model: &ModelConfig, feature_dir: &str) -> Result<Provider> {
    let opts = ProviderOptions {
        seed: PROVIDER_SEED,
        feature_dir: (!feature_dir.is_empty()).then(|| feature_dir.into()),
        visual_dim: model.visual_dim,
        text_dim: model.text_dim,
    };
    Ok(provider_registry(&model.prior_provider, &opts)?)
}

pub fn encode_priors(
    model: &ModelConfig,
    provider: &dyn PriorProvider<f32>,
    images: &[Image<f32>],
    ids: &[String],
) -> Result<RawBatchPriors<f32>> {
    Ok(RawBatchPriors::encode(
        provider,
        images,
        ids,
        &model.prompt,
        model.inject_visual,
        model.inject_text,
    )?)
}

fn synthetic(n: usize, size: usize, seed: u64) -> Result<PairedDataset<f32>> {
    Ok(PairedDataset::from_samples(synthetic_pairs(n, size, size, seed)?)?)
}

pub fn training_set(run: &RunSettings) -> Result<PairedDataset<f32>> {
    if run.data_dir.is_empty() {
        synthetic(run.synthetic_pairs, run.synthetic_size, run.data_seed)
    } else {
        Ok(load_paired_root(Path::new(&run.data_dir))?)
    }
}

/// `eval_data_dir`, or synthetic pairs drawn apart from the training ones.
pub fn eval_set(run: &RunSettings) -> Result<PairedDataset<f32>> {
    if run.eval_data_dir.is_empty() {
        synthetic(run.eval_pairs, run.synthetic_size, run.data_seed ^ HELD_OUT_SALT)
    } else {
        Ok(load_paired_root(Path::new(&run.eval_data_dir))?)
    }
}

/// Loads a checkpoint; with `expected`, any config difference is an error.
pub fn restore(path: &Path, expected: Option<&ModelConfig>) -> Result<(Mphm, ParamStore<f32>)> {
    let ck = checkpoint::load::<f32>(path, expected)?;
    Ok(ck.restore_model()?)
}

/// Restores one image at full size.
pub fn restore_image(
    model: &Mphm,
    store: &ParamStore<f32>,
    provider: &dyn PriorProvider<f32>,
    rain: &Image<f32>,
    id: &str,
) -> Result<Image<f32>> {
    let priors = encode_priors(&model.cfg, provider, std::slice::from_ref(rain), &[id.to_string()])?;
    let x = Image::to_batch(std::slice::from_ref(rain))?;
    let y = model.infer(store, &x, &priors)?;
    if let Some(i) = y.data().iter().position(|v| !v.is_finite()) {
        return Err(CliError::Numeric(format!("non-finite output for {id} at index {i}")));
    }
    Ok(Image::from_batch(&y, 0)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the rainy input against the ground truth.
    pub input_psnr: f64,
    pub input_ssim: f64,
}

pub fn evaluate_model(
    model: &Mphm,
    store: &ParamStore<f32>,
    provider: &dyn PriorProvider<f32>,
    ds: &PairedDataset<f32>,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let s = ds.get(i)?;
        let pred = restore_image(model, store, provider, &s.rainy, &s.id)?;
        rows.push(EvalRow {
            psnr: psnr(&pred, &s.clean)?,
            ssim: ssim(&pred, &s.clean)?,
            input_psnr: psnr(&s.rainy, &s.clean)?,
            input_ssim: ssim(&s.rainy, &s.clean)?,
            id: s.id,
        });
    }
    Ok(rows)
}

pub fn mean_row(rows: &[EvalRow]) -> EvalRow {
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    EvalRow {
        id: "mean".into(),
        psnr: avg(|r| r.psnr),
        ssim: avg(|r| r.ssim),
        input_psnr: avg(|r| r.input_psnr),
        input_ssim: avg(|r| r.input_ssim),
    }
}

/// One row per image plus a trailing mean row.
pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "psnr", "ssim", "input_psnr", "input_ssim"])?;
    for r in rows.iter().chain(std::iter::once(&mean_row(rows))) {
        w.write_record([
            r.id.clone(),
            format!("{:.6}", r.psnr),
            format!("{:.6}", r.ssim),
            format!("{:.6}", r.input_psnr),
            format!("{:.6}", r.input_ssim),
        ])?;
    }
    w.flush()?;
    Ok(())
}
