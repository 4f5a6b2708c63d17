use mphm_core::checkpoint::{self, TrainState};
use mphm_core::gradcheck::check_fn;
use mphm_core::image::Image;
use mphm_core::loss::{evaluate_loss, l_fcr, l_rec, sample_negatives, LossConfig};
use mphm_core::metrics::{gaussian_window, mse, psnr, ssim, ssim_window, PSNR_CAP};
use mphm_core::optim::{Adam, AdamConfig, CosineSchedule};
use mphm_core::priors::{MockProvider, RawBatchPriors};
use mphm_core::train::{TrainOptions, Trainer};
use mphm_core::{Error, Graph, ModelConfig, Mphm, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, 0.0, 1.0, &mut rng(seed))
}

/// Per-sample Σ over channels and bins of |Re| + |Im| of the DFT of `a − b`.
fn dft_l1(a: &Tensor<f64>, b: &Tensor<f64>, bi: usize) -> f64 {
    let (_, c, h, w) = a.dims4().unwrap();
    let mut total = 0.0;
    for ci in 0..c {
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let d = a.at(&[bi, ci, y, x]) - b.at(&[bi, ci, y, x]);
                        let ang = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        re += d * ang.cos();
                        im += d * ang.sin();
                    }
                }
                total += re.abs() + im.abs();
            }
        }
    }
    total
}

fn fcr_oracle(pred: &Tensor<f64>, gt: &Tensor<f64>, negs: &[Tensor<f64>], eps: f64) -> f64 {
    let b = pred.shape()[0];
    let mut acc = 0.0;
    for bi in 0..b {
        let num = dft_l1(gt, pred, bi);
        for n in negs {
            acc += num / (dft_l1(n, pred, bi) + eps);
        }
    }
    acc / (b * negs.len()) as f64
}

fn fcr(pred: &Tensor<f64>, gt: &Tensor<f64>, negs: &[Tensor<f64>], cfg: &LossConfig) -> f64 {
    evaluate_loss(pred, gt, negs, cfg).unwrap().2
}

#[test]
fn l_rec_matches_loop_and_closed_form() {
    let (a, b) = (uniform(&[2, 3, 9, 7], 1), uniform(&[2, 3, 9, 7], 2));
    let want = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    let mut g = Graph::new();
    let (pa, pb) = (g.input(a.clone()), g.input(b));
    let l = l_rec(&mut g, pa, pb).unwrap();
    assert!((g.value(l).data()[0] - want).abs() < 1e-7);
    let same = l_rec(&mut g, pa, pa).unwrap();
    assert_eq!(g.value(same).data()[0], 0.0);

    let mut g = Graph::<f64>::new();
    let p = g.input(Tensor::full(&[1, 3, 4, 4], 0.5));
    let z = g.input(Tensor::zeros(&[1, 3, 4, 4]));
    let l = l_rec(&mut g, p, z).unwrap();
    assert_eq!(g.value(l).data()[0], 0.5);
}

#[test]
fn l_fcr_matches_brute_force_dft() {
    let cfg = LossConfig::default();
    for (h, w) in [(4, 4), (5, 7), (8, 6)] {
        let shape = [2, 3, h, w];
        let (p, g) = (uniform(&shape, 3), uniform(&shape, 4));
        let negs = [uniform(&shape, 5), uniform(&shape, 6)];
        let got = fcr(&p, &g, &negs, &cfg);
        let want = fcr_oracle(&p, &g, &negs, cfg.epsilon);
        assert!((got - want).abs() / want < 1e-5, "{h}x{w}: {got} vs {want}");
    }
}

#[test]
fn loss_identities() {
    let shape = [2, 3, 8, 8];
    let (p, g) = (uniform(&shape, 7), uniform(&shape, 8));
    let negs = [uniform(&shape, 9), uniform(&shape, 10)];
    let cfg = LossConfig::default();
    assert_eq!(cfg.lambda_fcr, 0.1);
    assert_eq!(cfg.n_negatives, 2);

    assert_eq!(evaluate_loss(&g, &g, &negs, &cfg).unwrap(), (0.0, 0.0, 0.0));

    let no_fcr = LossConfig { lambda_fcr: 0.0, ..cfg };
    let (total, rec, _) = evaluate_loss(&p, &g, &negs, &no_fcr).unwrap();
    assert_eq!(total, rec);

    let (total, rec, f) = evaluate_loss(&p, &g, &negs, &cfg).unwrap();
    assert!((total - (rec + 0.1 * f)).abs() < 1e-15);
    assert!(rec > 0.0 && f > 0.0);
}

#[test]
fn weighted_sum_arithmetic() {
    // l_rec = 0.2 from a constant offset; l_fcr = 0.5 from a negative twice as far
    let gt = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
    let pred = Tensor::full(&[1, 1, 4, 4], 0.2);
    let neg = Tensor::full(&[1, 1, 4, 4], 0.6);
    let cfg = LossConfig {
        n_negatives: 1,
        epsilon: 1e-12,
        ..LossConfig::default()
    };
    let (total, rec, f) = evaluate_loss(&pred, &gt, &[neg], &cfg).unwrap();
    assert!((rec - 0.2).abs() < 1e-12);
    assert!((f - 0.5).abs() < 1e-9);
    assert!((total - 0.25).abs() < 1e-9);
}

#[test]
fn degenerate_negative_stays_finite() {
    let shape = [1, 3, 6, 6];
    let (p, g) = (uniform(&shape, 11), uniform(&shape, 12));
    let cfg = LossConfig::default();
    let (total, _, f) = evaluate_loss(&p, &g, &[p.clone(), p.clone()], &cfg).unwrap();
    assert!(total.is_finite() && f.is_finite());
    let want = dft_l1(&g, &p, 0) / cfg.epsilon;
    assert!((f - want).abs() / want < 1e-9);

    // and the gradient through the guarded ratio is finite too
    let mut graph = Graph::new();
    let (pv, gv) = (graph.leaf(p.clone(), true), graph.input(g));
    let nv = [graph.input(p.clone()), graph.input(p)];
    let l = l_fcr(&mut graph, pv, gv, &nv, &cfg).unwrap();
    let grads = graph.backward(l);
    assert!(grads.get(pv).unwrap().all_finite());
}

#[test]
fn loss_dims_and_counts_are_checked() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::zeros(&[1, 3, 4, 4]));
    let b = g.input(Tensor::zeros(&[1, 3, 4, 5]));
    assert!(matches!(l_rec(&mut g, a, b), Err(Error::Shape(_))));
    let cfg = LossConfig::default();
    assert!(matches!(l_fcr(&mut g, a, a, &[b, b], &cfg), Err(Error::Shape(_))));
    assert!(matches!(l_fcr(&mut g, a, a, &[a], &cfg), Err(Error::Config(_))));
    assert!(LossConfig { epsilon: 0.0, ..cfg }.validate().is_err());
    assert!(LossConfig { lambda_fcr: -1.0, ..cfg }.validate().is_err());
}

#[test]
fn loss_gradients() {
    let shape = [2, 3, 4, 5];
    let inputs = [uniform(&shape, 13), uniform(&shape, 14), uniform(&shape, 15), uniform(&shape, 16)];
    let cfg = LossConfig::default();
    let rep = check_fn(
        &inputs,
        |ctx, v| {
            let t = mphm_core::loss::total_loss(&mut ctx.g, v[0], v[1], &v[2..], &cfg)?;
            Ok(t.total)
        },
        1e-6,
    )
    .unwrap();
    assert!(rep.passes(1e-5), "{rep:?}");
}

fn roll(t: &Tensor<f64>, dy: usize, dx: usize) -> Tensor<f64> {
    let (b, c, h, w) = t.dims4().unwrap();
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(&[bi, ci, (y + dy) % h, (x + dx) % w], t.at(&[bi, ci, y, x]));
                }
            }
        }
    }
    out
}

fn reverse(t: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = t.dims4().unwrap();
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(&[bi, ci, (h - y) % h, (w - x) % w], t.at(&[bi, ci, y, x]));
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Quarter-period wrapped shifts multiply every bin by one of ±1, ±i and
    // circular index reversal permutes bins, so |Re|+|Im| sums are unchanged.
    #[test]
    fn l_fcr_is_invariant_to_wrapped_symmetries(qy in 0usize..4, qx in 0usize..4, flip in any::<bool>(), seed in 0u64..1000) {
        let shape = [2, 3, 8, 12];
        let (p, g) = (uniform(&shape, seed), uniform(&shape, seed + 1));
        let negs = [uniform(&shape, seed + 2), uniform(&shape, seed + 3)];
        let cfg = LossConfig::default();
        let base = fcr(&p, &g, &negs, &cfg);
        let tf = |t: &Tensor<f64>| {
            let r = roll(t, qy * 2, qx * 3);
            if flip { reverse(&r) } else { r }
        };
        let moved = fcr(&tf(&p), &tf(&g), &[tf(&negs[0]), tf(&negs[1])], &cfg);
        prop_assert!((moved - base).abs() / base < 1e-10);
    }

    #[test]
    fn losses_are_non_negative(seed in 0u64..1000) {
        let shape = [2, 3, 5, 5];
        let (p, g) = (uniform(&shape, seed), uniform(&shape, seed + 7));
        let negs = [uniform(&shape, seed + 8), uniform(&shape, seed + 9)];
        let (total, rec, f) = evaluate_loss(&p, &g, &negs, &LossConfig::default()).unwrap();
        prop_assert!(total > 0.0 && rec > 0.0 && f > 0.0);
    }

    #[test]
    fn ssim_is_bounded(seed in 0u64..1000, h in 1usize..24, w in 1usize..24) {
        let a = Image::from_tensor(uniform(&[3, h, w], seed)).unwrap();
        let b = Image::from_tensor(uniform(&[3, h, w], seed + 1)).unwrap();
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn psnr_decreases_with_noise(seed in 0u64..1000, k in 1usize..6) {
        let a = Image::from_tensor(uniform(&[3, 8, 8], seed)).unwrap();
        let noise = Tensor::<f64>::randn(&[3, 8, 8], 1.0, &mut rng(seed));
        let mk = |s: f64| Image::from_tensor(a.tensor().zip_map(&noise, |x, n| x + s * n)).unwrap();
        let s = 0.01 * k as f64;
        prop_assert!(psnr(&a, &mk(s)).unwrap() > psnr(&a, &mk(s * 1.5)).unwrap());
    }
}

#[test]
fn general_shift_changes_l1_spectrum() {
    // documents why only quarter-period shifts are asserted above
    let shape = [1, 1, 8, 8];
    let (p, g) = (uniform(&shape, 20), uniform(&shape, 21));
    let neg = [uniform(&shape, 22)];
    let cfg = LossConfig { n_negatives: 1, ..LossConfig::default() };
    let base = fcr(&p, &g, &neg, &cfg);
    let moved = fcr(&roll(&p, 1, 0), &roll(&g, 1, 0), &[roll(&neg[0], 1, 0)], &cfg);
    assert!((moved - base).abs() > 1e-6);
}

#[test]
fn psnr_closed_forms() {
    let a = Image::<f64>::constant(8, 8, 0.5);
    let z = Image::constant(8, 8, 0.0);
    assert!((psnr(&a, &z).unwrap() - 6.0206).abs() < 1e-4);
    assert_eq!(mse(&a, &z).unwrap(), 0.25);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert!(matches!(psnr(&a, &Image::constant(8, 9, 0.0)), Err(Error::Shape(_))));
}

fn ssim_oracle(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let (h, w) = a.dims();
    let n = ssim_window(h, w);
    let k1 = gaussian_window(n, 1.5);
    let (la, lb) = (a.luminance(), b.luminance());
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - n {
        for x0 in 0..=w - n {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let wt = k1[i] * k1[j];
                    let (x, y) = (la[(y0 + i) * w + x0 + j], lb[(y0 + i) * w + x0 + j]);
                    mx += wt * x;
                    my += wt * y;
                    sxx += wt * x * x;
                    syy += wt * y * y;
                    sxy += wt * x * y;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_window_loop_oracle() {
    for (h, w, seed) in [(32, 32, 1), (16, 20, 2), (7, 9, 3)] {
        let a = Image::from_tensor(uniform(&[3, h, w], seed)).unwrap();
        let b = Image::from_tensor(a.tensor().zip_map(&uniform(&[3, h, w], seed + 10), |x, n| 0.8 * x + 0.2 * n)).unwrap();
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-7, "{h}x{w}");
    }
}

#[test]
fn ssim_identity_and_anticorrelation() {
    let a = Image::from_tensor(uniform(&[3, 16, 16], 30)).unwrap();
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let inv = Image::from_tensor(a.tensor().map(|v| 1.0 - v)).unwrap();
    assert!(ssim(&a, &inv).unwrap() < 0.0);
    assert_eq!(gaussian_window(11, 1.5).len(), 11);
    assert!((gaussian_window(11, 1.5).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn cosine_schedule_closed_form() {
    let s = CosineSchedule::new(2e-4, 1e-6, 11).unwrap();
    for t in 0..11u64 {
        let want = 1e-6 + 0.5 * (2e-4 - 1e-6) * (1.0 + (std::f64::consts::PI * t as f64 / 10.0).cos());
        assert!((s.lr(t) - want).abs() < 1e-18);
    }
    assert_eq!(s.lr(50), s.lr(10));
    assert!(CosineSchedule::new(1e-3, 0.0, 0).is_err());
}

#[test]
fn negatives_exclude_self_when_possible() {
    let b = 5;
    let rain = Tensor::<f64>::from_vec(&[b, 1, 1, 1], (0..b).map(|i| i as f64).collect()).unwrap();
    let negs = sample_negatives(&rain, 2, &mut rng(40)).unwrap();
    for i in 0..b {
        let (a, c) = (negs[0].data()[i], negs[1].data()[i]);
        assert!(a != i as f64 && c != i as f64 && a != c);
    }
    let small = rain.batch_slice(0, 2).unwrap();
    let negs = sample_negatives(&small, 2, &mut rng(41)).unwrap();
    assert!(negs.iter().all(|n| n == &small));
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        visual_dim: 16,
        text_dim: 16,
        clip_bottleneck: 8,
        ..ModelConfig::tiny()
    }
}

fn train_batch(cfg: &ModelConfig) -> (Tensor<f32>, Tensor<f32>, RawBatchPriors<f32>) {
    let clean = Tensor::<f32>::rand_uniform(&[2, 3, 16, 16], 0.1, 0.8, &mut rng(50));
    let streaks = Tensor::<f32>::rand_uniform(&[2, 3, 16, 16], 0.0, 0.2, &mut rng(51));
    let rain = clean.zip_map(&streaks, |a, b| (a + b).min(1.0));
    let provider = MockProvider::new(3, cfg.visual_dim, cfg.text_dim);
    let imgs: Vec<_> = (0..2).map(|i| Image::from_batch(&rain, i).unwrap()).collect();
    let ids = vec!["a".to_string(), "b".to_string()];
    let p = RawBatchPriors::encode(&provider, &imgs, &ids, &cfg.prompt, true, true).unwrap();
    (rain, clean, p)
}

fn opts() -> TrainOptions {
    TrainOptions {
        steps: 6,
        lr: 1e-3,
        lr_min: 1e-5,
        seed: 9,
        ..TrainOptions::default()
    }
}

#[test]
fn checkpoint_keeps_moments_and_state() {
    let cfg = small_cfg();
    let (model, store) = Mphm::build::<f32>(&cfg, 1).unwrap();
    let mut tr = Trainer::new(model, store, opts()).unwrap();
    let (r, c, p) = train_batch(&cfg);
    tr.step(&r, &c, &p).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    tr.save(&path).unwrap();
    assert!(!dir.path().join("run.tmp").exists());

    let ck = checkpoint::load::<f32>(&path, Some(&cfg)).unwrap();
    assert_eq!(ck.params.tensors(), tr.store.tensors());
    let adam: Adam<f32> = ck.adam.clone().unwrap();
    assert_eq!(adam.t, 1);
    assert_eq!(adam.m, tr.adam.m);
    assert_eq!(adam.v, tr.adam.v);
    let state: TrainState = ck.state.clone().unwrap();
    assert_eq!(state.step, 1);
    assert_eq!(state.adam, AdamConfig::default());
    assert_eq!(state.last_loss, tr.last_loss);

    let wide = checkpoint::load::<f64>(&path, None).unwrap();
    assert_eq!(wide.params.cast::<f32>().tensors(), tr.store.tensors());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let cfg = small_cfg();
    let (r, c, p) = train_batch(&cfg);
    let fresh = || {
        let (model, store) = Mphm::build::<f32>(&cfg, 2).unwrap();
        Trainer::new(model, store, opts()).unwrap()
    };

    let mut straight = fresh();
    let full: Vec<f64> = (0..4).map(|_| straight.step(&r, &c, &p).unwrap().loss).collect();

    let mut first = fresh();
    let mut trace: Vec<f64> = (0..2).map(|_| first.step(&r, &c, &p).unwrap().loss).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    first.save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(checkpoint::load::<f32>(&path, Some(&cfg)).unwrap(), opts()).unwrap();
    assert_eq!(resumed.step, 2);
    trace.extend((0..2).map(|_| resumed.step(&r, &c, &p).unwrap().loss));

    assert_eq!(trace, full);
    assert_eq!(resumed.store.tensors(), straight.store.tensors());
}

#[test]
fn training_reduces_loss_and_clips() {
    let cfg = small_cfg();
    let (r, c, p) = train_batch(&cfg);
    let (model, store) = Mphm::build::<f32>(&cfg, 3).unwrap();
    let mut tr = Trainer::new(model, store, opts()).unwrap();
    let stats: Vec<_> = (0..6).map(|_| tr.step(&r, &c, &p).unwrap()).collect();
    assert!(tr.is_done());
    assert!(stats.iter().all(|s| s.loss.is_finite()));
    assert!(stats.last().unwrap().rec < stats[0].rec);
    assert!((stats[0].lr - 1e-3).abs() < 1e-15);
    assert!((stats[5].lr - 1e-5).abs() < 1e-15);
}
