//! Prior providers (frozen encoders) and the trainable adapters that turn
//! their tokens into stage-aligned priors.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::error::{config_err, shape_err, Error, Result};
use crate::image::Image;
use crate::nn::{Conv1x1, Conv2d, Ctx, Init, Linear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PATCH: usize = 16;
pub const VISUAL_DIM: usize = 384;
pub const TEXT_DIM: usize = 512;
pub const DEFAULT_PROMPT: &str = "No rain";

/// Patch tokens of one image, row-major over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVisualPrior<T> {
    /// `[grid_h · grid_w, d_v]`
    pub tokens: Tensor<T>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub source_id: String,
}

impl<T: Scalar> RawVisualPrior<T> {
    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// `[d_v, grid_h, grid_w]` channel-first layout.
    pub fn to_map(&self) -> Vec<T> {
        let (n, d) = (self.grid_h * self.grid_w, self.dim());
        let t = self.tokens.data();
        let mut out = vec![T::zero(); n * d];
        for p in 0..n {
            for c in 0..d {
                out[c * n + p] = t[p * d + c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTextPrior<T> {
    /// `[N_t, d_t]`
    pub tokens: Tensor<T>,
    pub prompt: String,
}

/// A frozen encoder pair. Implementations hold no trainable state.
pub trait PriorProvider<T: Scalar> {
    fn name(&self) -> &str;
    fn visual_dim(&self) -> usize;
    fn text_dim(&self) -> usize;
    /// `id` names the image for providers that look features up on disk.
    fn visual(&self, img: &Image<T>, id: &str) -> Result<RawVisualPrior<T>>;
    fn text(&self, prompt: &str) -> Result<RawTextPrior<T>>;
}

#[derive(Debug, Clone)]
pub struct ProviderOptions {
    pub seed: u64,
    pub feature_dir: Option<PathBuf>,
    pub visual_dim: usize,
    pub text_dim: usize,
}

impl Default for ProviderOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_dir: None,
            visual_dim: VISUAL_DIM,
            text_dim: TEXT_DIM,
        }
    }
}

/// `"mock"` or `"external"`.
pub fn provider_registry<T: Scalar>(name: &str, opts: &ProviderOptions) -> Result<Box<dyn PriorProvider<T>>> {
    match name {
        "mock" => Ok(Box::new(MockProvider::new(opts.seed, opts.visual_dim, opts.text_dim))),
        "external" => {
            let Some(dir) = &opts.feature_dir else {
                return config_err("external prior provider needs a feature directory");
            };
            Ok(Box::new(ExternalProvider {
                dir: dir.clone(),
                visual_dim: opts.visual_dim,
                text_dim: opts.text_dim,
            }))
        }
        _ => config_err(format!("unknown prior provider `{name}` (expected mock or external)")),
    }
}

/// Deterministic stand-in encoders: a fixed random patch projection and a
/// hash-seeded text embedding.
#[derive(Debug, Clone)]
pub struct MockProvider<T> {
    seed: u64,
    /// `[d_v, 3·PATCH²]`
    proj: Tensor<T>,
    text_dim: usize,
}

impl<T: Scalar> MockProvider<T> {
    pub fn new(seed: u64, visual_dim: usize, text_dim: usize) -> Self {
        let k = 3 * PATCH * PATCH;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7669_7375_616c);
        Self {
            seed,
            proj: Tensor::randn(&[visual_dim, k], 1.0 / (k as f64).sqrt(), &mut rng),
            text_dim,
        }
    }
}

impl<T: Scalar> PriorProvider<T> for MockProvider<T> {
    fn name(&self) -> &str {
        "mock"
    }

    fn visual_dim(&self) -> usize {
        self.proj.shape()[0]
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn visual(&self, img: &Image<T>, _id: &str) -> Result<RawVisualPrior<T>> {
        let (h, w) = img.dims();
        if h < PATCH || w < PATCH {
            return shape_err(format!("{h}x{w} image is smaller than one {PATCH}x{PATCH} patch"));
        }
        let (gh, gw) = (h / PATCH, w / PATCH);
        let d = self.visual_dim();
        let k = 3 * PATCH * PATCH;
        let pv = self.proj.data();
        let mut tokens = Vec::with_capacity(gh * gw * d);
        let mut patch = vec![T::zero(); k];
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..3 {
                    for y in 0..PATCH {
                        for x in 0..PATCH {
                            patch[(c * PATCH + y) * PATCH + x] = img.get(c, py * PATCH + y, px * PATCH + x);
                        }
                    }
                }
                for row in pv.chunks(k) {
                    tokens.push(row.iter().zip(&patch).map(|(&a, &b)| a * b).sum());
                }
            }
        }
        Ok(RawVisualPrior {
            tokens: Tensor::from_vec(&[gh * gw, d], tokens)?,
            grid_h: gh,
            grid_w: gw,
            source_id: "mock".into(),
        })
    }

    fn text(&self, prompt: &str) -> Result<RawTextPrior<T>> {
        if prompt.is_empty() {
            return config_err("text prompt must not be empty");
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(prompt.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let v = Tensor::<f64>::randn(&[1, self.text_dim], 1.0, &mut rng);
        let n = v.sq_norm().sqrt();
        Ok(RawTextPrior {
            tokens: v.scale(1.0 / n).cast(),
            prompt: prompt.to_string(),
        })
    }
}

const FEAT_MAGIC: &[u8; 8] = b"MPHMFEAT";
const FEAT_VERSION: u32 = 1;

/// Contents of an external feature file.
///
/// Layout (little endian): magic `MPHMFEAT`, `u32` version (1), `u32`
/// grid_h, grid_w, d_v, n_t, d_t, then `visual_tokens` as
/// `grid_h·grid_w·d_v` f32 values and `text_tokens` as `n_t·d_t` f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub grid_h: usize,
    pub grid_w: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub visual_tokens: Vec<f32>,
    pub text_tokens: Vec<f32>,
}

impl FeatureFile {
    pub fn n_text(&self) -> usize {
        if self.text_dim == 0 {
            0
        } else {
            self.text_tokens.len() / self.text_dim
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if self.visual_tokens.len() != self.grid_h * self.grid_w * self.visual_dim
            || (self.text_dim > 0 && self.text_tokens.len() % self.text_dim != 0)
        {
            return shape_err("feature arrays do not match their declared dims");
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(FEAT_MAGIC);
        for v in [
            FEAT_VERSION,
            self.grid_h as u32,
            self.grid_w as u32,
            self.visual_dim as u32,
            self.n_text() as u32,
            self.text_dim as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.visual_tokens.iter().chain(&self.text_tokens) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Validation {
            what: format!("feature file {}", path.display()),
            expected: "well-formed MPHMFEAT v1".into(),
            actual: m.to_string(),
        };
        if bytes.len() < 32 || &bytes[..8] != FEAT_MAGIC {
            return Err(bad("missing magic"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        if u(0) != FEAT_VERSION as usize {
            return Err(bad(&format!("version {}", u(0))));
        }
        let (gh, gw, dv, nt, dt) = (u(1), u(2), u(3), u(4), u(5));
        let nv = gh * gw * dv;
        let ntt = nt * dt;
        if bytes.len() != 32 + 4 * (nv + ntt) {
            return Err(bad(&format!("{} bytes for declared dims", bytes.len())));
        }
        let floats: Vec<f32> = bytes[32..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            grid_h: gh,
            grid_w: gw,
            visual_dim: dv,
            text_dim: dt,
            visual_tokens: floats[..nv].to_vec(),
            text_tokens: floats[nv..].to_vec(),
        })
    }
}

/// Reads precomputed features: `<dir>/<id>.mphmfeat` for images and
/// `<dir>/text.mphmfeat` for the prompt.
#[derive(Debug, Clone)]
pub struct ExternalProvider {
    pub dir: PathBuf,
    pub visual_dim: usize,
    pub text_dim: usize,
}

fn dim_check(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Validation {
            what: what.to_string(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        });
    }
    Ok(())
}

impl<T: Scalar> PriorProvider<T> for ExternalProvider {
    fn name(&self) -> &str {
        "external"
    }

    fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn visual(&self, _img: &Image<T>, id: &str) -> Result<RawVisualPrior<T>> {
        let stem = Path::new(id).file_stem().map_or(id.into(), |s| s.to_string_lossy());
        let f = FeatureFile::read(&self.dir.join(format!("{stem}.mphmfeat")))?;
        dim_check("visual token dim", self.visual_dim, f.visual_dim)?;
        if f.grid_h * f.grid_w == 0 {
            return shape_err(format!("feature file for {id} has an empty visual grid"));
        }
        let data = f.visual_tokens.iter().map(|&v| T::lit(v as f64)).collect();
        Ok(RawVisualPrior {
            tokens: Tensor::from_vec(&[f.grid_h * f.grid_w, f.visual_dim], data)?,
            grid_h: f.grid_h,
            grid_w: f.grid_w,
            source_id: "external".into(),
        })
    }

    fn text(&self, prompt: &str) -> Result<RawTextPrior<T>> {
        let f = FeatureFile::read(&self.dir.join("text.mphmfeat"))?;
        dim_check("text token dim", self.text_dim, f.text_dim)?;
        if f.n_text() == 0 {
            return shape_err("text feature file holds no tokens");
        }
        let data = f.text_tokens.iter().map(|&v| T::lit(v as f64)).collect();
        Ok(RawTextPrior {
            tokens: Tensor::from_vec(&[f.n_text(), f.text_dim], data)?,
            prompt: prompt.to_string(),
        })
    }
}

/// Encoder outputs for one batch, ready to be fed to the adapters.
#[derive(Debug, Clone)]
pub struct RawBatchPriors<T> {
    /// `[B, d_v, grid_h, grid_w]`
    pub visual: Option<Tensor<T>>,
    /// `[N_t, d_t]`
    pub text: Option<Tensor<T>>,
}

impl<T: Scalar> RawBatchPriors<T> {
    pub fn none() -> Self {
        Self { visual: None, text: None }
    }

    pub fn encode(
        provider: &dyn PriorProvider<T>,
        images: &[Image<T>],
        ids: &[String],
        prompt: &str,
        need_visual: bool,
        need_text: bool,
    ) -> Result<Self> {
        let visual = if need_visual {
            let mut maps = Vec::with_capacity(images.len());
            let mut grid = None;
            for (i, img) in images.iter().enumerate() {
                let id = ids.get(i).map_or("", String::as_str);
                let raw = provider.visual(img, id)?;
                if let Some(index) = raw.tokens.first_non_finite() {
                    return Err(Error::NonFinite {
                        context: format!("visual prior of {id}"),
                        index,
                    });
                }
                let g = (raw.dim(), raw.grid_h, raw.grid_w);
                if *grid.get_or_insert(g) != g {
                    return shape_err("visual priors of one batch differ in grid shape");
                }
                maps.push(Tensor::from_vec(&[1, g.0, g.1, g.2], raw.to_map())?);
            }
            Some(Tensor::stack_batch(&maps)?)
        } else {
            None
        };
        let text = if need_text {
            Some(provider.text(prompt)?.tokens)
        } else {
            None
        };
        Ok(Self { visual, text })
    }
}

/// Adapted priors of one forward pass, finest stage first.
#[derive(Debug, Clone, Default)]
pub struct PriorBundle {
    /// `[B, c_s, h_s, w_s]` per stage.
    pub p_v: Option<Vec<Var>>,
    /// `[B, N_t, c_s]` per stage.
    pub p_t: Option<Vec<Var>>,
}

/// Visual adapter: pointwise reduction, bilinear alignment to the finest
/// stage, then conv + pixel-unshuffle + pointwise steps for coarser stages.
#[derive(Debug, Clone)]
pub struct DinoAdapter {
    pub visual_dim: usize,
    pub channels: Vec<usize>,
    reduce: Conv1x1,
    downs: Vec<(Conv2d, Conv1x1)>,
}

impl DinoAdapter {
    /// `channels` lists stage widths finest first.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, visual_dim: usize, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return config_err("visual adapter needs at least one stage");
        }
        Ok(init.scope(name, |i| {
            let reduce = Conv1x1::new(i, "reduce", visual_dim, channels[0], true);
            let downs = channels
                .windows(2)
                .enumerate()
                .map(|(k, pair)| {
                    i.scope(format!("down{k}"), |i| {
                        (
                            Conv2d::new(i, "conv", pair[0], pair[0], 3, 1),
                            Conv1x1::new(i, "pw", 4 * pair[0], pair[1], true),
                        )
                    })
                })
                .collect();
            Self {
                visual_dim,
                channels: channels.to_vec(),
                reduce,
                downs,
            }
        }))
    }

    /// `tokens`: `[B, d_v, gh, gw]`; `stage_shapes`: `(c, h, w)` finest first.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        tokens: Var,
        stage_shapes: &[(usize, usize, usize)],
    ) -> Result<Vec<Var>> {
        if stage_shapes.len() != self.channels.len() {
            return config_err(format!(
                "visual adapter has {} stages, backbone asks for {}",
                self.channels.len(),
                stage_shapes.len()
            ));
        }
        for (k, (&(c, h, w), &ca)) in stage_shapes.iter().zip(&self.channels).enumerate() {
            if c != ca {
                return config_err(format!("visual adapter stage {k} has {ca} channels, expected {c}"));
            }
            if k > 0 {
                let (_, ph, pw) = stage_shapes[k - 1];
                if ph != 2 * h || pw != 2 * w {
                    return config_err(format!(
                        "stage shapes {:?} and {:?} are not related by a factor of 2",
                        stage_shapes[k - 1],
                        stage_shapes[k]
                    ));
                }
            }
        }
        let dv = ctx.g.shape(tokens)[1];
        if dv != self.visual_dim {
            return Err(Error::Validation {
                what: "visual token dim".into(),
                expected: self.visual_dim.to_string(),
                actual: dv.to_string(),
            });
        }
        let (_, h0, w0) = stage_shapes[0];
        let x = self.reduce.forward(ctx, tokens);
        let mut cur = ctx.g.bilinear_resize(x, h0, w0);
        let mut out = vec![cur];
        for (conv, pw) in &self.downs {
            let y = conv.forward(ctx, cur);
            let y = ctx.g.gelu(y);
            let y = ctx.g.pixel_unshuffle(y, 2)?;
            cur = pw.forward(ctx, y);
            out.push(cur);
        }
        Ok(out)
    }
}

/// Text adapter: shared bottleneck with a linear head per stage.
#[derive(Debug, Clone)]
pub struct ClipAdapter {
    pub text_dim: usize,
    pub bottleneck: usize,
    down: Linear,
    heads: Vec<Linear>,
}

impl ClipAdapter {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        text_dim: usize,
        bottleneck: usize,
        channels: &[usize],
    ) -> Self {
        init.scope(name, |i| Self {
            text_dim,
            bottleneck,
            down: Linear::new(i, "down", text_dim, bottleneck, true),
            heads: channels
                .iter()
                .enumerate()
                .map(|(k, &c)| Linear::new(i, &format!("head{k}"), bottleneck, c, true))
                .collect(),
        })
    }

    /// `tokens`: `[N_t, d_t]` -> one `[N_t, c_s]` matrix per stage.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, tokens: Var) -> Result<Vec<Var>> {
        let s = ctx.g.shape(tokens).to_vec();
        if s.len() != 2 || s[1] != self.text_dim {
            return Err(Error::Validation {
                what: "text token dim".into(),
                expected: self.text_dim.to_string(),
                actual: format!("{s:?}"),
            });
        }
        let z = self.down.forward(ctx, tokens);
        let z = ctx.g.gelu(z);
        Ok(self.heads.iter().map(|h| h.forward(ctx, z)).collect())
    }
}

/// Repeat `[N, C]` tokens over a batch: `[B, N, C]`.
pub fn broadcast_tokens<T: Scalar>(ctx: &mut Ctx<'_, T>, tokens: Var, batch: usize) -> Var {
    let s = ctx.g.shape(tokens).to_vec();
    let n = s[0] * s[1];
    let idx: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
    ctx.g.gather(tokens, Rc::new(idx), &[batch, s[0], s[1]])
}
