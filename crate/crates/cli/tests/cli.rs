use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mphm_cli::config::RunConfig;
use mphm_cli::pipeline::{evaluate_model, provider};
use mphm_cli::train::{train, train_until, LOG_FILE};
use mphm_cli::visualize::{colormap, pca, pca_rgb, residual_heatmap};
use mphm_core::{checkpoint, ModelConfig, Mphm};
use mphm_data::{load_png, save_png};
use tempfile::TempDir;

fn mphm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mphm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MPHM_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "base_channels=8",
    "--set",
    "stage_depths=[1,1,1,1,1]",
    "--set",
    "visual_dim=16",
    "--set",
    "text_dim=16",
    "--set",
    "clip_bottleneck=8",
];

fn tiny_cfg(out: &Path, steps: u64) -> RunConfig {
    let mut sets: Vec<String> = TINY.chunks(2).map(|c| c[1].to_string()).collect();
    sets.extend([
        format!("steps={steps}"),
        "batch=2".into(),
        "crop=32".into(),
        "synthetic_pairs=3".into(),
        "synthetic_size=32".into(),
        "log_every=0".into(),
        format!("out_dir=\"{}\"", out.display()),
    ]);
    RunConfig::resolve(None, None, &sets).unwrap()
}

/// Identity-initialized tiny checkpoint plus a 3-pair dataset.
fn fixture() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let o = mphm(&["gen-data", "--out", "data", "--n", "3", "--seed", "2", "--size", "32"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = tiny_cfg(dir.path(), 1).model;
    let (_, store) = Mphm::build::<f32>(&cfg, 1).unwrap();
    let ck = dir.path().join("init.mphm");
    checkpoint::save(&ck, &cfg, &store, None, None).unwrap();
    (dir, ck)
}

#[test]
fn default_config_is_complete_and_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let o = mphm(&["default-config", "--out", "c.toml"], dir.path());
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(dir.path().join("c.toml")).unwrap();
    assert!(text.contains("# base width C"));
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), RunConfig::default());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&mphm(&["train", "--set", "no_such_key=1"], p)), 2);
    std::fs::write(p.join("bad.toml"), "[model]\nbase_channels = 8\n").unwrap();
    assert_eq!(code(&mphm(&["train", "--config", "bad.toml"], p)), 2);
    assert_eq!(code(&mphm(&["train", "--set", "data_dir=missing", "--set", "steps=1"], p)), 3);
    assert_eq!(code(&mphm(&["ablate", "--axis", "depth", "--out", "ab"], p)), 2);
    assert_eq!(code(&mphm(&["infer", "--ckpt", "none.mphm", "--in", "x.png", "--out", "y.png"], p)), 3);
    std::fs::create_dir_all(p.join("empty/rain")).unwrap();
    std::fs::create_dir_all(p.join("empty/norain")).unwrap();
    let (_fx, ck) = fixture();
    let o = mphm(&["eval", "--ckpt", ck.to_str().unwrap(), "--data", "empty", "--out", "e.csv"], p);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!p.join("e.csv").exists());
}

#[test]
fn eval_of_identity_model_matches_input_scores() {
    let (dir, ck) = fixture();
    let p = dir.path();
    let o = mphm(&["eval", "--ckpt", "init.mphm", "--data", "data", "--out", "ev.csv"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut r = csv::Reader::from_path(p.join("ev.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3 + 1);
    assert_eq!(&rows[3][0], "mean");
    for row in &rows {
        assert_eq!(row[1], row[3], "psnr of {}", &row[0]);
        assert_eq!(row[2], row[4], "ssim of {}", &row[0]);
    }

    // model settings that disagree with the checkpoint are rejected
    let mut args = vec!["eval", "--ckpt", ck.to_str().unwrap(), "--data", "data", "--out", "ev2.csv"];
    args.extend_from_slice(TINY);
    assert_eq!(code(&mphm(&args, p)), 0);
    args.extend_from_slice(&["--set", "inject_text=false"]);
    let o = mphm(&args, p);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("inject_text"), "{}", stderr(&o));
}

#[test]
fn infer_keeps_odd_sizes_and_is_repeatable() {
    let (dir, _) = fixture();
    let p = dir.path();
    let rain = mphm_data::scenes::procedural_scene::<f64>(67, 93, 4);
    save_png(&p.join("odd.png"), &rain).unwrap();
    for out in ["a.png", "b.png"] {
        let o = mphm(&["infer", "--ckpt", "init.mphm", "--in", "odd.png", "--out", out], p);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = std::fs::read(p.join("a.png")).unwrap();
    assert_eq!(a, std::fs::read(p.join("b.png")).unwrap());
    let img = load_png::<f64>(&p.join("a.png")).unwrap();
    assert_eq!(img.dims(), (67, 93));
    // identity model: the 8-bit output reproduces the 8-bit input
    assert_eq!(img, load_png::<f64>(&p.join("odd.png")).unwrap());
}

#[test]
fn visualize_kinds() {
    let (dir, _) = fixture();
    let p = dir.path();
    let gt = "data/norain/0000.png";
    let o = mphm(&["visualize", "--kind", "residual_heatmap", "--pred", gt, "--gt", gt, "--out", "h.png"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let h = load_png::<f64>(&p.join("h.png")).unwrap();
    assert_eq!(h.dims(), (32, 32));
    let first: Vec<f64> = (0..3).map(|c| h.get(c, 0, 0)).collect();
    assert!((0..32 * 32).all(|i| (0..3).all(|c| h.get(c, i / 32, i % 32) == first[c])));

    let o = mphm(
        &["visualize", "--kind", "residual_heatmap", "--ckpt", "init.mphm", "--in", "data/rain/0001.png", "--gt", "data/norain/0001.png", "--out", "h2.png"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = mphm(
        &["visualize", "--kind", "pca_features", "--ckpt", "init.mphm", "--in", "data/rain/0000.png", "--layer", "enc1", "--out", "pca.png"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_png::<f64>(&p.join("pca.png")).unwrap().dims(), (32, 32));

    let o = mphm(
        &["visualize", "--kind", "pca_features", "--ckpt", "init.mphm", "--in", "data/rain/0000.png", "--layer", "nope", "--out", "x.png"],
        p,
    );
    assert_eq!(code(&o), 2);
    for hook in ["embed", "enc0", "enc1", "bottleneck", "dec0", "dec1"] {
        assert!(stderr(&o).contains(hook), "{}", stderr(&o));
    }
}

#[test]
fn heatmap_of_identical_images_is_uniform_zero() {
    let img = mphm_data::scenes::procedural_scene::<f64>(9, 11, 1);
    let h = residual_heatmap(&img, &img, None).unwrap();
    let zero = colormap(0.0);
    for c in 0..3 {
        assert!(h.data()[c * 99..(c + 1) * 99].iter().all(|&v| v == zero[c]));
    }
}

#[test]
fn pca_of_rank_one_map() {
    let (c, h, w) = (5, 6, 7);
    let u = [0.5, 1.0, 2.0, 0.25, 1.5];
    let s: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
    let feats: Vec<f64> = (0..c).flat_map(|ch| s.iter().map(move |v| u[ch] * v)).collect();
    let p = pca(&feats, c, h, w, 3).unwrap();
    // direct: the covariance is var(s) u uᵀ, so its only non-zero eigenvalue is var(s)|u|²
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
    let unorm2: f64 = u.iter().map(|x| x * x).sum();
    assert!((p.eigenvalues[0] - var * unorm2).abs() < 1e-10 * var * unorm2);
    assert!(p.eigenvalues[1..].iter().all(|e| e.abs() < 1e-10));
    let unorm = unorm2.sqrt();
    for (proj, sv) in p.projections[0].iter().zip(&s) {
        assert!((proj - (sv - mean) * unorm).abs() < 1e-10);
    }

    let rgb = pca_rgb(&feats, c, h, w).unwrap();
    let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &x| (l.min(x), u.max(x)));
    for (i, sv) in s.iter().enumerate() {
        assert!((rgb.get(0, i / w, i % w) - (sv - lo) / (hi - lo)).abs() < 1e-10);
        assert_eq!(rgb.get(1, i / w, i % w), 0.0);
        assert_eq!(rgb.get(2, i / w, i % w), 0.0);
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(&tiny_cfg(&dir.path().join("a"), 4), false).unwrap();
    let b = train(&tiny_cfg(&dir.path().join("b"), 4), false).unwrap();
    let losses = |r: &mphm_cli::train::TrainReport| r.history.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.steps, 4);

    let cfg = tiny_cfg(&dir.path().join("c"), 4);
    let first = train_until(&cfg, false, Some(3)).unwrap();
    assert_eq!(first.steps, 3);
    let rest = train_until(&cfg, true, None).unwrap();
    assert_eq!(rest.steps, 4);
    let joined: Vec<u64> = first.history.iter().chain(&rest.history).map(|s| s.loss.to_bits()).collect();
    assert_eq!(joined, losses(&a));
    let log = std::fs::read_to_string(dir.path().join("c").join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1 + 4);

    let ca = checkpoint::load::<f32>(&a.checkpoint, None).unwrap();
    let cc = checkpoint::load::<f32>(&rest.checkpoint, None).unwrap();
    assert_eq!(ca.params.tensors(), cc.params.tensors());
}

#[test]
fn non_finite_loss_exits_4_and_keeps_the_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&[
        "--set", "steps=6", "--set", "batch=1", "--set", "crop=32", "--set", "synthetic_pairs=2",
        "--set", "synthetic_size=32", "--set", "checkpoint_every=1", "--set", "out_dir=run",
        "--set", "lr=1e30", "--set", "lr_min=1e30",
    ]);
    let o = mphm(&args, p);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("kept"), "{}", stderr(&o));
    let ck = checkpoint::load::<f32>(&p.join("run/checkpoint.mphm"), None).unwrap();
    let step = ck.state.unwrap().step;
    assert!(step >= 1);
    assert!(ck.params.tensors().iter().all(|t| t.data().iter().all(|v| v.is_finite())));
}

#[test]
fn seed_env_overrides_file_and_set_overrides_env() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("c.toml"), "seed = 1\nsteps = 1\nbatch = 1\ncrop = 16\nsynthetic_pairs = 1\nsynthetic_size = 16\nout_dir = \"r\"\n")
        .unwrap();
    let run = |env: Option<&str>, extra: &[&str]| {
        let mut args = vec!["train", "--config", "c.toml"];
        args.extend_from_slice(TINY);
        args.extend_from_slice(extra);
        let mut c = Command::new(env!("CARGO_BIN_EXE_mphm"));
        c.args(&args).current_dir(p).env("RUST_LOG", "warn").env_remove("MPHM_SEED");
        if let Some(s) = env {
            c.env("MPHM_SEED", s);
        }
        let o = c.output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        RunConfig::from_toml_str(&std::fs::read_to_string(p.join("r/config.toml")).unwrap()).unwrap().run.seed
    };
    assert_eq!(run(None, &[]), 1);
    assert_eq!(run(Some("7"), &[]), 7);
    assert_eq!(run(Some("7"), &["--set", "seed=9"]), 9);
}

#[test]
fn evaluate_model_scores_every_pair() {
    let cfg = ModelConfig {
        visual_dim: 16,
        text_dim: 16,
        clip_bottleneck: 8,
        ..ModelConfig::tiny()
    };
    let (model, store) = Mphm::build::<f32>(&cfg, 3).unwrap();
    let samples = mphm_data::scenes::synthetic_pairs::<f32>(2, 24, 40, 5).unwrap();
    let ds = mphm_data::PairedDataset::from_samples(samples).unwrap();
    let prov = provider(&cfg, "").unwrap();
    let rows = evaluate_model(&model, &store, prov.as_ref(), &ds).unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.psnr, r.input_psnr);
        assert!(r.psnr.is_finite());
    }
}
