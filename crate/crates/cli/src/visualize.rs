//! Residual heatmaps and PCA projections of hooked feature maps.

use std::path::Path;

use log::info;
use mphm_core::backbone::hook_names;
use mphm_core::image::Image;
use mphm_core::nn::Ctx;
use mphm_data::{load_png, save_png};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{CliError, Result};
use crate::pipeline::{encode_priors, provider, restore, restore_image};

/// Inferno-like ramp sampled at five points.
const RAMP: [[f64; 3]; 5] = [
    [0.000, 0.000, 0.016],
    [0.341, 0.063, 0.431],
    [0.737, 0.216, 0.329],
    [0.976, 0.557, 0.035],
    [0.988, 1.000, 0.643],
];

pub fn colormap(t: f64) -> [f64; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    std::array::from_fn(|c| RAMP[i][c] * (1.0 - f) + RAMP[i + 1][c] * f)
}

/// `Σ_c |pred − gt|` per pixel, row-major.
pub fn residual_map(pred: &Image<f64>, gt: &Image<f64>) -> Result<Vec<f64>> {
    if pred.dims() != gt.dims() {
        return Err(CliError::Data(format!("prediction {:?} and ground truth {:?} differ in size", pred.dims(), gt.dims())));
    }
    let (h, w) = pred.dims();
    let mut out = vec![0.0; h * w];
    for c in 0..3 {
        let (a, b) = (&pred.data()[c * h * w..(c + 1) * h * w], &gt.data()[c * h * w..(c + 1) * h * w]);
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o += (x - y).abs();
        }
    }
    Ok(out)
}

/// Colormapped `values / scale`; `scale = None` uses the maximum (all-zero maps stay zero).
pub fn heatmap(values: &[f64], h: usize, w: usize, scale: Option<f64>) -> Image<f64> {
    let top = scale.unwrap_or_else(|| values.iter().cloned().fold(0.0, f64::max));
    let mut img = Image::constant(h, w, 0.0);
    for (i, &v) in values.iter().enumerate() {
        let rgb = colormap(if top > 0.0 { v / top } else { 0.0 });
        for (c, x) in rgb.into_iter().enumerate() {
            img.set(c, i / w, i % w, x);
        }
    }
    img
}

pub fn residual_heatmap(pred: &Image<f64>, gt: &Image<f64>, scale: Option<f64>) -> Result<Image<f64>> {
    let (h, w) = pred.dims();
    Ok(heatmap(&residual_map(pred, gt)?, h, w, scale))
}

/// Top principal components of the channel vectors of a `c × h × w` map.
pub struct Pca {
    /// Eigenvalues of the channel covariance, largest first.
    pub eigenvalues: Vec<f64>,
    /// `k × (h·w)` projections on the leading components.
    pub projections: Vec<Vec<f64>>,
}

pub fn pca(features: &[f64], c: usize, h: usize, w: usize, k: usize) -> Result<Pca> {
    let n = h * w;
    if features.len() != c * n || n == 0 || c == 0 {
        return Err(CliError::Data(format!("feature map of {} values is not {c}x{h}x{w}", features.len())));
    }
    let x = DMatrix::from_fn(n, c, |p, ch| features[ch * n + p]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, c, |p, ch| x[(p, ch)] - mean[ch]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut projections = Vec::new();
    for &j in order.iter().take(k) {
        let mut vec = eig.eigenvectors.column(j).into_owned();
        // deterministic sign: the largest loading is positive
        let lead = vec.iter().cloned().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if lead < 0.0 {
            vec = -vec;
        }
        projections.push((&centered * vec).iter().cloned().collect());
    }
    Ok(Pca {
        eigenvalues: order.iter().map(|&j| eig.eigenvalues[j]).collect(),
        projections,
    })
}

/// First three components as RGB, each min-max normalized. Components whose
/// range is negligible next to the first one come out as zero.
pub fn pca_rgb(features: &[f64], c: usize, h: usize, w: usize) -> Result<Image<f64>> {
    let p = pca(features, c, h, w, 3)?;
    let range = |v: &[f64]| {
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &x| (l.min(x), u.max(x)));
        (lo, hi - lo)
    };
    let first = p.projections.first().map_or(0.0, |v| range(v).1);
    let mut img = Image::constant(h, w, 0.0);
    for (ch, comp) in p.projections.iter().enumerate() {
        let (lo, r) = range(comp);
        if first == 0.0 || !(r > 1e-9 * first) {
            continue;
        }
        for (i, &v) in comp.iter().enumerate() {
            img.set(ch, i / w, i % w, (v - lo) / r);
        }
    }
    Ok(img)
}

/// Nearest-neighbour resize of a map covering a `ph × pw` padded frame,
/// cropped to the leading `oh × ow` pixels.
pub fn resize_nearest(img: &Image<f64>, ph: usize, pw: usize, oh: usize, ow: usize) -> Image<f64> {
    let (fh, fw) = img.dims();
    let mut out = Image::constant(oh, ow, 0.0);
    for c in 0..3 {
        for y in 0..oh {
            for x in 0..ow {
                out.set(c, y, x, img.get(c, (y * fh / ph).min(fh - 1), (x * fw / pw).min(fw - 1)));
            }
        }
    }
    out
}

fn file_id(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Heatmap of a checkpoint's restoration of `input` (or of `pred`) against `gt`.
pub fn heatmap_command(
    ckpt: Option<&Path>,
    input: Option<&Path>,
    pred: Option<&Path>,
    gt: &Path,
    out: &Path,
    feature_dir: &str,
) -> Result<()> {
    let gt_img = load_png::<f64>(gt)?;
    let pred_img = match (pred, ckpt, input) {
        (Some(p), _, _) => load_png::<f64>(p)?,
        (None, Some(ck), Some(inp)) => {
            let (model, store) = restore(ck, None)?;
            let prov = provider(&model.cfg, feature_dir)?;
            let rain = load_png::<f32>(inp)?;
            restore_image(&model, &store, prov.as_ref(), &rain, &file_id(inp))?.cast()
        }
        _ => return Err(CliError::Config("residual_heatmap needs --pred, or --ckpt with --in".into())),
    };
    let img = residual_heatmap(&pred_img, &gt_img, None)?;
    save_png(out, &img)?;
    info!("wrote {}", out.display());
    Ok(())
}

/// PCA projection of hooked layer `layer` for `input`, at the input size.
pub fn pca_command(ckpt: &Path, input: &Path, layer: &str, out: &Path, feature_dir: &str) -> Result<()> {
    let (model, store) = restore(ckpt, None)?;
    let hooks = hook_names(&model.cfg);
    if !hooks.iter().any(|h| h == layer) {
        return Err(CliError::Config(format!("unknown layer {layer:?}; valid hooks: {}", hooks.join(", "))));
    }
    let prov = provider(&model.cfg, feature_dir)?;
    let rain = load_png::<f32>(input)?;
    let id = file_id(input);
    let priors = encode_priors(&model.cfg, prov.as_ref(), std::slice::from_ref(&rain), &[id])?;
    let mut ctx = Ctx::new(&store, false).with_recording();
    let x = ctx.input(Image::to_batch(std::slice::from_ref(&rain))?);
    model.forward(&mut ctx, x, &priors)?;
    let var = ctx
        .hooked(layer)
        .ok_or_else(|| CliError::Config(format!("layer {layer:?} was not recorded; valid hooks: {}", ctx.hook_names().join(", "))))?;
    let shape = ctx.g.shape(var).to_vec();
    let feats: Vec<f64> = ctx.g.value(var).data().iter().map(|&v| v as f64).collect();
    let (c, fh, fw) = (shape[1], shape[2], shape[3]);
    let rgb = pca_rgb(&feats, c, fh, fw)?;
    let (h, w) = rain.dims();
    let m = model.cfg.pad_multiple();
    let img = resize_nearest(&rgb, h.div_ceil(m) * m, w.div_ceil(m) * m, h, w);
    save_png(out, &img)?;
    info!("wrote {} from layer {layer} ({c}x{fh}x{fw})", out.display());
    Ok(())
}
