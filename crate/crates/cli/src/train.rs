use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use mphm_core::checkpoint;
use mphm_core::train::{StepStats, Trainer};
use mphm_core::Mphm;
use mphm_data::batch_iter;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{encode_priors, eval_set, evaluate_model, mean_row, provider, training_set};

pub const CHECKPOINT_FILE: &str = "checkpoint.mphm";
pub const LOG_FILE: &str = "train_log.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Steps completed in total, including any resumed ones.
    pub steps: u64,
    /// Stats of the steps taken by this call.
    pub history: Vec<StepStats>,
    pub checkpoint: PathBuf,
}

/// Append-only CSV with a header written once.
struct CsvLog {
    w: csv::Writer<std::fs::File>,
}

impl CsvLog {
    fn open(path: &Path, header: &[&str], append: bool) -> Result<Self> {
        let existing = append && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !existing {
            w.write_record(header)?;
            w.flush()?;
        }
        Ok(Self { w })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.w.write_record(fields)?;
        self.w.flush()?;
        Ok(())
    }
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains per `cfg`, writing checkpoints and logs under `cfg.run.out_dir`.
/// With `resume`, continues from the checkpoint there when one exists.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainReport> {
    train_until(cfg, resume, None)
}

/// [`train`], stopping (with a checkpoint) once `stop_at` steps are done.
pub fn train_until(cfg: &RunConfig, resume: bool, stop_at: Option<u64>) -> Result<TrainReport> {
    cfg.validate()?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let rendered = cfg.render();
    info!("resolved config:\n{rendered}");
    std::fs::write(out.join(CONFIG_FILE), &rendered)?;

    let ckpt = out.join(CHECKPOINT_FILE);
    let opts = cfg.train_options();
    let mut trainer = if resume && ckpt.exists() {
        let ck = checkpoint::load::<f32>(&ckpt, Some(&cfg.model))?;
        let t = Trainer::resume(ck, opts)?;
        info!("resuming from {} at step {}", ckpt.display(), t.step);
        t
    } else {
        if resume {
            warn!("no checkpoint at {}; starting fresh", ckpt.display());
        }
        let (model, store) = Mphm::build::<f32>(&cfg.model, cfg.run.seed)?;
        Trainer::new(model, store, opts)?
    };
    let resumed = trainer.step > 0;

    let ds = training_set(&cfg.run)?;
    let eval_ds = if cfg.run.eval_every > 0 { Some(eval_set(&cfg.run)?) } else { None };
    let prov = provider(&cfg.model, &cfg.run.feature_dir)?;
    info!(
        "training on {} pairs for {} steps ({} parameters)",
        ds.len(),
        trainer.schedule.total_steps,
        trainer.store.num_elements()
    );

    let mut log = CsvLog::open(
        &out.join(LOG_FILE),
        &["step", "loss", "rec", "fcr", "lr", "grad_norm", "wall_s"],
        resumed,
    )?;
    let mut eval_log = match eval_ds {
        Some(_) => Some(CsvLog::open(&out.join(EVAL_LOG_FILE), &["step", "psnr", "ssim"], resumed)?),
        None => None,
    };

    let per_epoch = ds.len().div_ceil(cfg.run.batch) as u64;
    let mut epoch = trainer.step / per_epoch;
    let mut skip = (trainer.step % per_epoch) as usize;
    let mut history = Vec::new();
    let mut saved_at: Option<u64> = None;
    let start = Instant::now();
    let halt = |t: &Trainer<f32>| t.is_done() || stop_at.is_some_and(|s| t.step >= s);
    while !halt(&trainer) {
        let crop = cfg.run.crop;
        let mut it = batch_iter(&ds, crop, cfg.run.batch, cfg.run.augment, epoch_seed(cfg.run.seed, epoch))?;
        for _ in 0..skip {
            it.next().transpose()?;
        }
        skip = 0;
        for batch in it {
            if halt(&trainer) {
                break;
            }
            let batch = batch?;
            let priors = encode_priors(&cfg.model, prov.as_ref(), &batch.rain_images()?, &batch.ids)?;
            let stats = match trainer.step(&batch.rain, &batch.clean, &priors) {
                Ok(s) => s,
                Err(e @ mphm_core::Error::NonFinite { .. }) => {
                    let kept = match saved_at {
                        Some(s) => format!("last good checkpoint {} (step {s}) kept", ckpt.display()),
                        None if ckpt.exists() => format!("previous checkpoint {} kept", ckpt.display()),
                        None => "no checkpoint was written".into(),
                    };
                    return Err(CliError::Numeric(format!("{e}; {kept}")));
                }
                Err(e) => return Err(e.into()),
            };
            log.row(&[
                stats.step.to_string(),
                format!("{:.8e}", stats.loss),
                format!("{:.8e}", stats.rec),
                format!("{:.8e}", stats.fcr),
                format!("{:.6e}", stats.lr),
                format!("{:.6e}", stats.grad_norm),
                format!("{:.3}", start.elapsed().as_secs_f64()),
            ])?;
            let done = trainer.step;
            if cfg.run.log_every > 0 && done % cfg.run.log_every == 0 {
                info!(
                    "step {done}: loss {:.5} rec {:.5} fcr {:.4} lr {:.2e}",
                    stats.loss, stats.rec, stats.fcr, stats.lr
                );
            }
            history.push(stats);
            if cfg.run.checkpoint_every > 0 && done % cfg.run.checkpoint_every == 0 {
                trainer.save(&ckpt)?;
                saved_at = Some(done);
            }
            if let (Some(ds), Some(log)) = (&eval_ds, eval_log.as_mut()) {
                if done % cfg.run.eval_every == 0 {
                    let m = mean_row(&evaluate_model(&trainer.model, &trainer.store, prov.as_ref(), ds)?);
                    info!("step {done}: eval psnr {:.3} ssim {:.4}", m.psnr, m.ssim);
                    log.row(&[done.to_string(), format!("{:.6}", m.psnr), format!("{:.6}", m.ssim)])?;
                }
            }
        }
        epoch += 1;
    }
    if saved_at != Some(trainer.step) {
        trainer.save(&ckpt)?;
    }
    info!("done: {} steps in {:.1} s, checkpoint {}", trainer.step, start.elapsed().as_secs_f64(), ckpt.display());
    Ok(TrainReport {
        steps: trainer.step,
        history,
        checkpoint: ckpt,
    })
}
