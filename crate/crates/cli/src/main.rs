use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mphm_cli::ablate::{ablate, Axis};
use mphm_cli::commands::{evaluate, gen_data, infer};
use mphm_cli::visualize::{heatmap_command, pca_command};
use mphm_cli::{alloc, config::RunConfig, train::train_until, Result};

#[derive(Parser)]
#[command(name = "mphm", version, about = "Multi-prior hierarchical Mamba deraining")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Kind {
    ResidualHeatmap,
    PcaFeatures,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; checkpoints and logs go to `out_dir`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. `--set steps=500`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Continue from the checkpoint in `out_dir` if present.
        #[arg(long)]
        resume: bool,
        /// Stop once this many steps are done in total; resume later with `--resume`.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Score a checkpoint on a paired directory (rain/ and norain/).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Require the checkpoint to match this config's model settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value = "")]
        features: String,
    },
    /// Derain one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "")]
        features: String,
    },
    /// Train and evaluate every variant along one ablation axis.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// hmm_branches | branch_fusion | prior_injection | priors_fusion
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Residual heatmaps and PCA feature projections.
    Visualize {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Ground truth for residual_heatmap.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Precomputed prediction for residual_heatmap instead of a checkpoint.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Hooked layer for pca_features.
        #[arg(long, default_value = "bottleneck")]
        layer: String,
        #[arg(long, default_value = "")]
        features: String,
    },
    /// Write synthetic rain/clean pairs.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Print the full default config with comments.
    DefaultConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn need(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| mphm_cli::CliError::Config(format!("{what} is required for this kind")))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train {
            config,
            sets,
            resume,
            stop_at,
        } => {
            let cfg = RunConfig::resolve_env(config.as_deref(), &sets)?;
            train_until(&cfg, resume, stop_at)?;
        }
        Cmd::Eval {
            ckpt,
            data,
            out,
            config,
            sets,
            features,
        } => {
            let expected = match (&config, sets.is_empty()) {
                (None, true) => None,
                _ => Some(RunConfig::resolve_env(config.as_deref(), &sets)?.model),
            };
            evaluate(&ckpt, &data, &out, expected.as_ref(), &features)?;
        }
        Cmd::Infer { ckpt, input, out, features } => infer(&ckpt, &input, &out, &features)?,
        Cmd::Ablate { config, axis, out, sets } => {
            let axis: Axis = axis.parse()?;
            let cfg = RunConfig::resolve_env(config.as_deref(), &sets)?;
            ablate(&cfg, axis, &out)?;
        }
        Cmd::Visualize {
            kind,
            out,
            ckpt,
            input,
            gt,
            pred,
            layer,
            features,
        } => match kind {
            Kind::ResidualHeatmap => {
                let gt = need(gt, "--gt")?;
                heatmap_command(ckpt.as_deref(), input.as_deref(), pred.as_deref(), &gt, &out, &features)?
            }
            Kind::PcaFeatures => {
                let ckpt = need(ckpt, "--ckpt")?;
                let input = need(input, "--in")?;
                pca_command(&ckpt, &input, &layer, &out, &features)?
            }
        },
        Cmd::GenData { out, n, seed, size } => gen_data(&out, n, seed, size)?,
        Cmd::DefaultConfig { out } => {
            let text = RunConfig::default().render();
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    alloc::tune_allocator();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
