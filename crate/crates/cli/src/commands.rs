//! eval, infer and gen-data.

use std::path::Path;

use log::info;
use mphm_core::ModelConfig;
use mphm_data::scenes::{synthetic_pairs, write_pairs};
use mphm_data::{load_paired_root, load_png, save_png};

use crate::error::{CliError, Result};
use crate::pipeline::{evaluate_model, mean_row, provider, restore, restore_image, write_eval_csv, EvalRow};

fn log_model_config(cfg: &ModelConfig) {
    if let Ok(toml::Value::Table(t)) = toml::Value::try_from(cfg) {
        let lines: Vec<String> = t.iter().map(|(k, v)| format!("{k} = {v}")).collect();
        info!("model config:\n{}", lines.join("\n"));
    }
}

/// Scores a checkpoint on `data` (a root with `rain/` and `norain/`) and
/// writes per-image rows plus a mean row to `out`.
pub fn evaluate(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    expected: Option<&ModelConfig>,
    feature_dir: &str,
) -> Result<Vec<EvalRow>> {
    let (model, store) = restore(ckpt, expected)?;
    log_model_config(&model.cfg);
    let ds = load_paired_root::<f32>(data)?;
    if ds.is_empty() {
        return Err(CliError::Data(format!("dataset in {} is empty", data.display())));
    }
    let prov = provider(&model.cfg, feature_dir)?;
    let rows = evaluate_model(&model, &store, prov.as_ref(), &ds)?;
    write_eval_csv(out, &rows)?;
    let m = mean_row(&rows);
    info!(
        "{} images: psnr {:.3} dB (input {:.3}), ssim {:.4} (input {:.4})",
        rows.len(),
        m.psnr,
        m.input_psnr,
        m.ssim,
        m.input_ssim
    );
    Ok(rows)
}

/// Derains one PNG of any size into an 8-bit PNG.
pub fn infer(ckpt: &Path, input: &Path, output: &Path, feature_dir: &str) -> Result<()> {
    let (model, store) = restore(ckpt, None)?;
    log_model_config(&model.cfg);
    let rain = load_png::<f32>(input)?;
    let id = input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let prov = provider(&model.cfg, feature_dir)?;
    let pred = restore_image(&model, &store, prov.as_ref(), &rain, &id)?;
    save_png(output, &pred)?;
    info!("wrote {} ({}x{})", output.display(), pred.height(), pred.width());
    Ok(())
}

/// Writes `n` synthetic pairs of `size × size` under `out/rain` and `out/norain`.
pub fn gen_data(out: &Path, n: usize, seed: u64, size: usize) -> Result<()> {
    if n == 0 || size == 0 {
        return Err(CliError::Config("gen-data needs n >= 1 and size >= 1".into()));
    }
    let pairs = synthetic_pairs::<f32>(n, size, size, seed)?;
    write_pairs(out, &pairs)?;
    info!("wrote {n} pairs of {size}x{size} to {}", out.display());
    Ok(())
}
