//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p mphm-cli --test acceptance`. Exits nonzero when a
//! hard criterion fails; the ablation ordering check is reported but soft.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use mphm_cli::ablate::{variant_configs, Axis};
use mphm_cli::config::RunConfig;
use mphm_cli::pipeline::{eval_set, evaluate_model, mean_row, provider, restore, restore_image, training_set};
use mphm_cli::train::train;
use mphm_core::complexity::count_params_flops;
use mphm_core::gradcheck::{check_module, randomize_params, GradCheckOptions, GradCheckReport};
use mphm_core::hmm::{Ffcm, FusionScheme, Hmm, HmmConfig};
use mphm_core::image::Image;
use mphm_core::loss::{evaluate_loss, l_rec, LossConfig};
use mphm_core::metrics::{gaussian_window, mse, psnr, ssim, ssim_window};
use mphm_core::nn::{Ctx, Init, ParamStore};
use mphm_core::ops::fft::{fft2, ifft2};
use mphm_core::ops::scan::{cross_merge, cross_scan, selective_scan_forward};
use mphm_core::pfi::{Gdfn, Pfi, PfiConfig, PriorFusion};
use mphm_core::priors::{MockProvider, RawBatchPriors};
use mphm_core::vssm::{Vssm, VssmConfig};
use mphm_core::{Graph, ModelConfig, Mphm, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

// ---------------------------------------------------------------- oracles

fn scan_oracle(x: &Tensor<f64>, delta: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>, c: &Tensor<f64>, d: &Tensor<f64>) -> Vec<f64> {
    let (bs, l, dd) = x.dims3().unwrap();
    let n = a.shape()[1];
    let mut y = vec![0.0; bs * l * dd];
    for bi in 0..bs {
        let mut h = vec![vec![0.0; n]; dd];
        for t in 0..l {
            for di in 0..dd {
                let xt = x.at(&[bi, t, di]);
                let dt = delta.at(&[bi, t, di]);
                let mut acc = 0.0;
                for ni in 0..n {
                    h[di][ni] = (dt * a.at(&[di, ni])).exp() * h[di][ni] + dt * b.at(&[bi, t, ni]) * xt;
                    acc += c.at(&[bi, t, ni]) * h[di][ni];
                }
                y[(bi * l + t) * dd + di] = acc + d.at(&[di]) * xt;
            }
        }
    }
    y
}

fn dw_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let (bs, c, h, wd) = x.dims4().unwrap();
    let k = w.shape()[1];
    let p = (k / 2) as isize;
    let mut y = Tensor::zeros(&[bs, c, h, wd]);
    for bi in 0..bs {
        for ci in 0..c {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = b[ci];
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = mirror(oy as isize + ky as isize - p, h);
                            let sx = mirror(ox as isize + kx as isize - p, wd);
                            acc += w.at(&[ci, ky, kx]) * x.at(&[bi, ci, sy, sx]);
                        }
                    }
                    y.set(&[bi, ci, oy, ox], acc);
                }
            }
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn gdfn_oracle(store: &ParamStore<f64>, m: &Gdfn, f: &Tensor<f64>) -> Tensor<f64> {
    let (bs, c, h, w) = f.dims4().unwrap();
    let hid = m.hidden;
    let gamma = store.get(m.ln.gamma).data();
    let beta = store.get(m.ln.beta).data();
    let (w_in, w_dw, w_out) = (store.get(m.pw_in.w), store.get(m.dw.w), store.get(m.pw_out.w));
    let mut out = f.clone();
    for bi in 0..bs {
        let mut e = vec![vec![vec![0.0; w]; h]; 2 * hid];
        for y in 0..h {
            for x in 0..w {
                let v: Vec<f64> = (0..c).map(|ci| f.at(&[bi, ci, y, x])).collect();
                let mean = v.iter().sum::<f64>() / c as f64;
                let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / c as f64;
                let n: Vec<f64> = (0..c).map(|ci| (v[ci] - mean) / (var + 1e-5).sqrt() * gamma[ci] + beta[ci]).collect();
                for (o, plane) in e.iter_mut().enumerate() {
                    plane[y][x] = (0..c).map(|ci| w_in.at(&[o, ci]) * n[ci]).sum();
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let dw = |o: usize| {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = mirror(y as isize + ky as isize - 1, h);
                            let sx = mirror(x as isize + kx as isize - 1, w);
                            acc += w_dw.at(&[o, ky, kx]) * e[o][sy][sx];
                        }
                    }
                    acc
                };
                let gated: Vec<f64> = (0..hid).map(|j| gelu(dw(j)) * dw(hid + j)).collect();
                for co in 0..c {
                    let add: f64 = (0..hid).map(|j| w_out.at(&[co, j]) * gated[j]).sum();
                    out.set(&[bi, co, y, x], f.at(&[bi, co, y, x]) + add);
                }
            }
        }
    }
    out
}

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

fn ssim_oracle(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let (h, w) = a.dims();
    let n = ssim_window(h, w);
    let k1 = gaussian_window(n, 1.5);
    let (la, lb) = (a.luminance(), b.luminance());
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut total, mut count) = (0.0, 0);
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

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, 0.0, 1.0, &mut rng(seed))
}

fn oracles() -> Outcome {
    let mut notes = Vec::new();

    let mut r = rng(1);
    let (bs, l, d, n) = (2, 32, 4, 4);
    let x = Tensor::randn(&[bs, l, d], 1.0, &mut r);
    let delta = Tensor::rand_uniform(&[bs, l, d], 0.01, 0.5, &mut r);
    let a = Tensor::rand_uniform(&[d, n], -2.0, -0.1, &mut r);
    let b = Tensor::randn(&[bs, l, n], 1.0, &mut r);
    let c = Tensor::randn(&[bs, l, n], 1.0, &mut r);
    let dd = Tensor::randn(&[d], 1.0, &mut r);
    let (y, _) = selective_scan_forward(&x, &delta, &a, &b, &c, &dd).map_err(|e| e.to_string())?;
    let err = max_diff(y.data(), &scan_oracle(&x, &delta, &a, &b, &c, &dd));
    ensure(err < 1e-5, || format!("selective scan off by {err:.2e}"))?;
    notes.push(format!("scan {err:.1e}"));

    let mut r = rng(2);
    let xi = Tensor::<f64>::randn(&[2, 3, 32, 32], 1.0, &mut r);
    let wt = Tensor::randn(&[3, 7, 7], 0.3, &mut r);
    let bias = Tensor::randn(&[3], 0.1, &mut r);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(xi.clone()), g.input(wt.clone()), g.input(bias.clone()));
    let yv = g.dwconv(xv, wv, Some(bv)).map_err(|e| e.to_string())?;
    let err = g.value(yv).max_abs_diff(&dw_oracle(&xi, &wt, bias.data()));
    ensure(err < 1e-6, || format!("depthwise conv off by {err:.2e}"))?;
    notes.push(format!("dwconv {err:.1e}"));

    let mut store = ParamStore::<f64>::new();
    let m = Gdfn::new(&mut Init::new(&mut store, 0), "gdfn", 8, 10).map_err(|e| e.to_string())?;
    randomize_params(&mut store, 11, 0.4);
    let f = Tensor::randn(&[2, 8, 9, 11], 1.0, &mut rng(3));
    let mut ctx = Ctx::new(&store, false);
    let fv = ctx.input(f.clone());
    let yv = m.forward(&mut ctx, fv).map_err(|e| e.to_string())?;
    let err = ctx.g.value(yv).max_abs_diff(&gdfn_oracle(&store, &m, &f));
    ensure(err < 1e-7, || format!("GDFN off by {err:.2e}"))?;
    notes.push(format!("gdfn {err:.1e}"));

    let (p, q) = (uniform(&[2, 3, 16, 16], 4), uniform(&[2, 3, 16, 16], 5));
    let want = p.data().iter().zip(q.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / p.len() as f64;
    let mut g = Graph::new();
    let (pv, qv) = (g.input(p.clone()), g.input(q.clone()));
    let lv = l_rec(&mut g, pv, qv).map_err(|e| e.to_string())?;
    let err = (g.value(lv).data()[0] - want).abs();
    ensure(err < 1e-7, || format!("reconstruction loss off by {err:.2e}"))?;
    notes.push(format!("l_rec {err:.1e}"));

    let cfg = LossConfig::default();
    let shape = [2, 3, 8, 12];
    let (p, gt) = (uniform(&shape, 6), uniform(&shape, 7));
    let negs = [uniform(&shape, 8), uniform(&shape, 9)];
    let got = evaluate_loss(&p, &gt, &negs, &cfg).map_err(|e| e.to_string())?.2;
    let want = fcr_oracle(&p, &gt, &negs, cfg.epsilon);
    let rel = (got - want).abs() / want;
    ensure(rel < 1e-5, || format!("contrastive loss off by {rel:.2e} relative"))?;
    notes.push(format!("l_fcr {rel:.1e} rel"));

    let a = Image::from_tensor(uniform(&[3, 32, 32], 10)).map_err(|e| e.to_string())?;
    let b = Image::from_tensor(a.tensor().zip_map(&uniform(&[3, 32, 32], 11), |x, n| 0.8 * x + 0.2 * n)).map_err(|e| e.to_string())?;
    let m = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    let err = (psnr(&a, &b).map_err(|e| e.to_string())? - 10.0 * (1.0 / m).log10()).abs();
    ensure(err < 1e-7, || format!("PSNR off by {err:.2e}"))?;
    let mse_err = (mse(&a, &b).map_err(|e| e.to_string())? - m).abs();
    ensure(mse_err < 1e-12, || format!("MSE off by {mse_err:.2e}"))?;
    notes.push(format!("psnr {err:.1e}"));

    let err = (ssim(&a, &b).map_err(|e| e.to_string())? - ssim_oracle(&a, &b)).abs();
    ensure(err < 1e-7, || format!("SSIM off by {err:.2e}"))?;
    notes.push(format!("ssim {err:.1e}"));

    Ok(notes.join(", "))
}

// ---------------------------------------------------------------- gradients

fn gc_opts(per_tensor: usize) -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        per_tensor: Some(per_tensor),
        params: true,
        seed: 1,
    }
}

fn judge(name: &str, rep: &GradCheckReport, tol: f64) -> std::result::Result<String, String> {
    ensure(rep.passes(tol) && rep.analytic_norm > 0.0, || format!("{name}: {rep:?}"))?;
    Ok(format!("{name} ok"))
}

fn small_model() -> ModelConfig {
    ModelConfig {
        visual_dim: 16,
        text_dim: 16,
        clip_bottleneck: 8,
        ..ModelConfig::tiny()
    }
}

fn mock_priors<T: Scalar>(cfg: &ModelConfig, x: &Tensor<T>) -> RawBatchPriors<T> {
    let provider = MockProvider::new(7, cfg.visual_dim, cfg.text_dim);
    let b = x.shape()[0];
    let images: Vec<Image<T>> = (0..b).map(|i| Image::from_batch(x, i).unwrap()).collect();
    let ids: Vec<String> = (0..b).map(|i| i.to_string()).collect();
    RawBatchPriors::encode(&provider, &images, &ids, &cfg.prompt, cfg.inject_visual, cfg.inject_text).unwrap()
}

fn gradients() -> Outcome {
    let mut notes = Vec::new();
    let e = |e: mphm_core::Error| e.to_string();

    let mut store = ParamStore::<f64>::new();
    let m = Vssm::new(&mut Init::new(&mut store, 2), "vssm", 4, &VssmConfig::default()).map_err(e)?;
    randomize_params(&mut store, 3, 0.4);
    let x = [Tensor::randn(&[1, 4, 4, 5], 1.0, &mut rng(4))];
    let rep = check_module(&mut store, &x, |ctx, v| m.forward(ctx, v[0]), &gc_opts(6)).map_err(e)?;
    notes.push(judge("vssm", &rep, 1e-3)?);

    let mut store = ParamStore::<f64>::new();
    let m = Ffcm::new(&mut Init::new(&mut store, 5), "ffcm", 4, 2).map_err(e)?;
    randomize_params(&mut store, 6, 0.4);
    let x = [Tensor::randn(&[1, 4, 6, 5], 1.0, &mut rng(7))];
    let rep = check_module(&mut store, &x, |ctx, v| m.forward(ctx, v[0]), &gc_opts(6)).map_err(e)?;
    notes.push(judge("ffcm", &rep, 1e-3)?);

    let mut store = ParamStore::<f64>::new();
    let m = Hmm::new(&mut Init::new(&mut store, 8), "hmm", &HmmConfig::new(8)).map_err(e)?;
    randomize_params(&mut store, 9, 0.3);
    let x = [Tensor::randn(&[1, 8, 4, 4], 1.0, &mut rng(10))];
    let rep = check_module(&mut store, &x, |ctx, v| m.forward(ctx, v[0]), &gc_opts(6)).map_err(e)?;
    notes.push(judge("hmm", &rep, 1e-3)?);

    let mut store = ParamStore::<f64>::new();
    let m = Pfi::new(&mut Init::new(&mut store, 11), "pfi", &PfiConfig::new(8, 2)).map_err(e)?;
    randomize_params(&mut store, 12, 0.3);
    let mut r = rng(13);
    let x = [
        Tensor::randn(&[1, 8, 4, 4], 1.0, &mut r),
        Tensor::randn(&[1, 8, 4, 4], 1.0, &mut r),
        Tensor::randn(&[1, 2, 8], 1.0, &mut r),
    ];
    let rep = check_module(&mut store, &x, |ctx, v| m.forward(ctx, v[0], Some(v[1]), Some(v[2])), &gc_opts(6)).map_err(e)?;
    notes.push(judge("pfi", &rep, 1e-3)?);

    let cfg = small_model();
    let (model, store) = Mphm::build::<f64>(&cfg, 14).map_err(e)?;
    let mut store: ParamStore<f64> = store;
    randomize_params(&mut store, 15, 0.15);
    let x = Tensor::<f64>::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng(16));
    let p = mock_priors(&cfg, &x);
    let rep = check_module(&mut store, &[x], |ctx, v| Ok(model.forward(ctx, v[0], &p)?.residual), &gc_opts(2)).map_err(e)?;
    notes.push(judge("backbone", &rep, 1e-2)?);

    Ok(notes.join(", "))
}

// ---------------------------------------------------------------- invariants

fn invariants() -> Outcome {
    let e = |e: mphm_core::Error| e.to_string();
    let mut notes = Vec::new();

    let mut worst_rt: f64 = 0.0;
    let mut worst_pv: f64 = 0.0;
    for (h, w) in [(4, 4), (5, 7), (16, 16), (9, 32)] {
        let x = Tensor::<f64>::randn(&[2, 3, h, w], 1.0, &mut rng((h * w) as u64));
        let s = fft2(&x).map_err(e)?;
        worst_rt = worst_rt.max(ifft2(&s).max_abs_diff(&x));
        let spatial: f64 = x.data().iter().map(|v| v * v).sum();
        worst_pv = worst_pv.max((s.energy() / (h * w) as f64 - spatial).abs() / spatial);
    }
    ensure(worst_rt < 1e-10 && worst_pv < 1e-10, || format!("fft roundtrip {worst_rt:.1e}, parseval {worst_pv:.1e}"))?;
    notes.push("fft".to_string());

    for (h, w) in [(1, 1), (3, 5), (8, 8), (7, 4)] {
        let x = Tensor::<f64>::randn(&[2, 3, h, w], 1.0, &mut rng(100 + (h * w) as u64));
        let seqs = cross_scan(&x).map_err(e)?;
        let err = cross_merge(&seqs, h, w).map_err(e)?.max_abs_diff(&x.map(|v| 4.0 * v));
        ensure(err < 1e-12, || format!("merge of scan at {h}x{w} off by {err:.1e}"))?;
    }
    notes.push("scan/merge".to_string());

    // identity at initialization with the fusion output zeroed
    for (cfg, prefixes) in [
        (HmmConfig::new(8), vec!["hmm.fuse."]),
        (HmmConfig { fusion_scheme: FusionScheme::Addition, ..HmmConfig::new(8) }, vec!["hmm.spatial.out.", "hmm.ffcm.merge."]),
    ] {
        let mut store = ParamStore::<f64>::new();
        let m = Hmm::new(&mut Init::new(&mut store, 17), "hmm", &cfg).map_err(e)?;
        store.zero_where(|n| prefixes.iter().any(|p| n.starts_with(p)));
        for (h, w) in [(5, 6), (8, 8), (3, 11)] {
            let x = Tensor::randn(&[2, 8, h, w], 1.0, &mut rng(18));
            let mut ctx = Ctx::new(&store, false);
            let v = ctx.input(x.clone());
            let y = m.forward(&mut ctx, v).map_err(e)?;
            ensure(ctx.g.value(y) == &x, || format!("HMM {:?} is not the identity at {h}x{w}", cfg.fusion_scheme))?;
        }
    }
    for fusion in [PriorFusion::Hierarchical, PriorFusion::Addition, PriorFusion::Concat, PriorFusion::JointCrossAttention] {
        let mut store = ParamStore::<f64>::new();
        let cfg = PfiConfig { fusion_scheme: fusion, ..PfiConfig::new(8, 2) };
        let m = Pfi::new(&mut Init::new(&mut store, 19), "pfi", &cfg).map_err(e)?;
        let mut r = rng(20);
        let f = Tensor::randn(&[2, 8, 5, 3], 1.0, &mut r);
        let pv = Tensor::randn(&[2, 8, 5, 3], 1.0, &mut r);
        let pt = Tensor::randn(&[2, 3, 8], 1.0, &mut r);
        let mut ctx = Ctx::new(&store, false);
        let (fv, vv, tv) = (ctx.input(f.clone()), ctx.input(pv), ctx.input(pt));
        let y = m.forward(&mut ctx, fv, Some(vv), Some(tv)).map_err(e)?;
        ensure(ctx.g.value(y) == &f, || format!("PFI {fusion:?} is not the identity at init"))?;
    }
    notes.push("hmm/pfi identity".to_string());

    for (cfg, h, w) in [(small_model(), 32, 32), (small_model(), 35, 41), (ModelConfig::tiny(), 17, 23)] {
        let (model, store) = Mphm::build::<f32>(&cfg, 21).map_err(e)?;
        let x = Tensor::<f32>::rand_uniform(&[2, 3, h, w], 0.0, 1.0, &mut rng(22));
        let y = model.infer(&store, &x, &mock_priors(&cfg, &x)).map_err(e)?;
        ensure(y == x, || format!("network is not the identity at init at {h}x{w}"))?;
    }
    notes.push("network identity".to_string());

    let variants = [
        ModelConfig { ffcm_enabled: false, ..small_model() },
        ModelConfig { dw_enabled: false, ..small_model() },
        ModelConfig { inject_visual: false, inject_text: false, ..small_model() },
    ];
    for cfg in variants {
        let (model, mut store) = Mphm::build::<f32>(&cfg, 23).map_err(e)?;
        let id = store.id("out.weight").ok_or("no out.weight")?;
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, 0.05, &mut rng(24));
        for (h, w) in [(67, 93), (16, 16), (17, 19)] {
            let x = Tensor::<f32>::rand_uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng(25));
            let y = model.infer(&store, &x, &mock_priors(&cfg, &x)).map_err(e)?;
            ensure(y.shape() == x.shape(), || format!("{h}x{w} came back as {:?}", y.shape()))?;
        }
    }
    notes.push("shapes".to_string());
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------- losses

fn loss_semantics() -> Outcome {
    let cfg = LossConfig::default();
    ensure(cfg.lambda_fcr == 0.1 && cfg.n_negatives == 2, || format!("defaults are {cfg:?}"))?;
    let shape = [2, 3, 8, 8];
    let (p, gt) = (uniform(&shape, 30), uniform(&shape, 31));
    let negs = [uniform(&shape, 32), uniform(&shape, 33)];
    let at_gt = evaluate_loss(&gt, &gt, &negs, &cfg).map_err(|e| e.to_string())?;
    ensure(at_gt == (0.0, 0.0, 0.0), || format!("loss(gt, gt) = {at_gt:?}"))?;
    let (total, rec, f) = evaluate_loss(&p, &gt, &[p.clone(), p.clone()], &cfg).map_err(|e| e.to_string())?;
    ensure(total.is_finite() && f.is_finite(), || format!("degenerate negative gave {total}"))?;
    ensure((total - (rec + 0.1 * f)).abs() <= 1e-9 * total, || "total is not rec + 0.1 fcr".into())?;
    Ok(format!("lambda 0.1, 2 negatives, loss(gt, gt) = 0, degenerate negative fcr {f:.3e}"))
}

// ---------------------------------------------------------------- training runs

const TINY: [&str; 2] = ["base_channels=8", "stage_depths=[1,1,1,1,1]"];

fn run_config(out: &Path, extra: &[String]) -> std::result::Result<RunConfig, String> {
    let mut sets: Vec<String> = TINY.iter().map(|s| s.to_string()).collect();
    sets.extend(extra.iter().cloned());
    sets.push("log_every=0".into());
    sets.push(format!("out_dir=\"{}\"", out.display()));
    RunConfig::resolve(None, None, &sets).map_err(|e| e.to_string())
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let extra: Vec<String> = [
        "steps=500",
        "batch=1",
        "crop=64",
        "augment=false",
        "synthetic_pairs=1",
        "synthetic_size=64",
        "checkpoint_every=0",
    ]
    .map(String::from)
    .to_vec();
    let cfg = run_config(dir.path(), &extra)?;
    let start = Instant::now();
    let report = train(&cfg, false).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (model, store) = restore(&report.checkpoint, Some(&cfg.model)).map_err(|e| e.to_string())?;
    let prov = provider(&cfg.model, "").map_err(|e| e.to_string())?;
    let ds = training_set(&cfg.run).map_err(|e| e.to_string())?;
    let m = mean_row(&evaluate_model(&model, &store, prov.as_ref(), &ds).map_err(|e| e.to_string())?);
    let msg = format!(
        "training-pair PSNR {:.2} dB after {} steps (input {:.2} dB) in {:.0} s",
        m.psnr,
        report.steps,
        m.input_psnr,
        elapsed.as_secs_f64()
    );
    ensure(m.psnr >= 30.0 && elapsed < Duration::from_secs(600), || msg.clone())?;
    Ok(msg)
}

fn ablation_direction() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let extra: Vec<String> = [
        "steps=300",
        "batch=4",
        "crop=32",
        "synthetic_pairs=20",
        "synthetic_size=32",
        "eval_pairs=20",
        "checkpoint_every=0",
    ]
    .map(String::from)
    .to_vec();
    let base = run_config(dir.path(), &extra)?;
    let eval_ds = eval_set(&base.run).map_err(|e| e.to_string())?;
    let mut scores = Vec::new();
    for (var, cfg) in variant_configs(&base, Axis::PriorInjection, dir.path()).map_err(|e| e.to_string())? {
        let report = train(&cfg, false).map_err(|e| e.to_string())?;
        let (model, store) = restore(&report.checkpoint, Some(&cfg.model)).map_err(|e| e.to_string())?;
        let prov = provider(&cfg.model, "").map_err(|e| e.to_string())?;
        let m = mean_row(&evaluate_model(&model, &store, prov.as_ref(), &eval_ds).map_err(|e| e.to_string())?);
        scores.push((var.slug, m.psnr));
    }
    let get = |s: &str| scores.iter().find(|(k, _)| *k == s).map(|(_, v)| *v).unwrap_or(f64::NAN);
    let (none, vis, text, both) = (get("none"), get("visual"), get("text"), get("both"));
    let single = vis.max(text);
    let msg = format!("held-out PSNR none {none:.3}, P_v {vis:.3}, P_t {text:.3}, both {both:.3}");
    ensure(both >= single - 0.2 && single >= none - 0.2, || msg.clone())?;
    Ok(msg)
}

fn complexity() -> Outcome {
    let (params, macs) = count_params_flops(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let (dp, dm) = (params as f64 / 10.28e6 - 1.0, macs as f64 / 61.89e9 - 1.0);
    let msg = format!(
        "{:.3} M params ({:+.1}%), {:.2} G MACs ({:+.1}%) at 256x256",
        params as f64 / 1e6,
        100.0 * dp,
        macs as f64 / 1e9,
        100.0 * dm
    );
    ensure(dp.abs() <= 0.25 && dm.abs() <= 0.25, || msg.clone())?;
    Ok(msg)
}

fn bits(img: &Image<f32>) -> Vec<u32> {
    img.data().iter().map(|v| v.to_bits()).collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let extra: Vec<String> = ["steps=10", "batch=2", "crop=32", "synthetic_pairs=4", "synthetic_size=32"].map(String::from).to_vec();
    let mut traces = Vec::new();
    let mut outputs = Vec::new();
    let probe = Image::from_tensor(Tensor::<f32>::rand_uniform(&[3, 37, 45], 0.0, 1.0, &mut rng(40))).map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        let cfg = run_config(&dir.path().join(run), &extra)?;
        let report = train(&cfg, false).map_err(|e| e.to_string())?;
        traces.push(report.history.iter().map(|s| s.loss).collect::<Vec<_>>());
        let (model, store) = restore(&report.checkpoint, Some(&cfg.model)).map_err(|e| e.to_string())?;
        let prov = provider(&cfg.model, "").map_err(|e| e.to_string())?;
        for _ in 0..2 {
            outputs.push(bits(&restore_image(&model, &store, prov.as_ref(), &probe, "probe").map_err(|e| e.to_string())?));
        }
    }
    ensure(traces[0].len() == 10 && traces[1].len() == 10, || format!("trace lengths {} and {}", traces[0].len(), traces[1].len()))?;
    let diff = max_diff(&traces[0], &traces[1]);
    ensure(diff <= 1e-6, || format!("loss traces differ by {diff:.2e}"))?;
    ensure(outputs.windows(2).all(|w| w[0] == w[1]), || "inference outputs differ".into())?;
    Ok(format!("10-step traces differ by {diff:.1e}, inference bit-identical across runs"))
}

// ---------------------------------------------------------------- driver

fn main() {
    mphm_cli::alloc::tune_allocator();
    std::panic::set_hook(Box::new(|_| {}));
    let criteria: [(u32, &str, bool, fn() -> Outcome); 8] = [
        (1, "oracle equivalence", true, oracles),
        (2, "gradient correctness", true, gradients),
        (3, "structural invariants", true, invariants),
        (4, "loss semantics", true, loss_semantics),
        (5, "single-pair overfit", true, overfit),
        (6, "prior ablation direction (soft)", false, ablation_direction),
        (7, "complexity band", true, complexity),
        (8, "determinism", true, determinism),
    ];
    let mut hard_failures = 0;
    for (n, name, hard, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail}; {secs:.1} s)"),
            Err(detail) => {
                println!("criterion {n} {name}: FAIL ({detail}; {secs:.1} s)");
                if hard {
                    hard_failures += 1;
                }
            }
        }
    }
    if hard_failures > 0 {
        println!("{hard_failures} hard criteria failed");
        std::process::exit(1);
    }
}
