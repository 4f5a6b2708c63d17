//! Binary checkpoints: config, parameters, optimizer moments and run state.
//!
//! Layout: `MPHMCKPT`, u32 version, u32 header length, JSON header, raw
//! little-endian tensors (params, then Adam `m` and `v` if present), and a
//! trailing SHA-256 of everything before it. Writes go through a temporary
//! file and an atomic rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ModelConfig, Mphm};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig, CosineSchedule};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MPHMCKPT";
pub const VERSION: u32 = 1;

/// Run bookkeeping needed to resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer steps completed.
    pub step: u64,
    pub seed: u64,
    pub schedule: CosineSchedule,
    pub adam: AdamConfig,
    pub last_loss: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ModelConfig,
    config_hash: String,
    params: Vec<(String, Vec<usize>)>,
    has_moments: bool,
    adam_t: u64,
    state: Option<TrainState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub adam: Option<Adam<T>>,
    pub state: Option<TrainState>,
}

pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::CorruptCheckpoint(msg.into()))
}

fn write_tensor<T: Scalar>(buf: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(buf);
    }
}

pub fn save<T: Scalar>(
    path: &Path,
    config: &ModelConfig,
    params: &ParamStore<T>,
    adam: Option<&Adam<T>>,
    state: Option<&TrainState>,
) -> Result<()> {
    let header = Header {
        dtype: T::DTYPE.to_string(),
        config: config.clone(),
        config_hash: config_hash(config),
        params: params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        has_moments: adam.is_some(),
        adam_t: adam.map_or(0, |a| a.t),
        state: state.cloned(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    params.tensors().iter().for_each(|t| write_tensor(&mut buf, t));
    if let Some(a) = adam {
        a.m.iter().chain(&a.v).for_each(|t| write_tensor(&mut buf, t));
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return corrupt("truncated payload");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self, dtype: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match dtype {
            "f32" => self
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            "f64" => self
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            other => return corrupt(format!("unknown dtype {other}")),
        };
        Tensor::from_vec(shape, data)
    }
}

/// Reads and verifies a checkpoint. With `expected`, the stored config must
/// match it exactly. Tensors stored in the other precision are converted.
pub fn load<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return corrupt("file too short");
    }
    if &bytes[..8] != MAGIC {
        return corrupt("bad magic");
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return corrupt("checksum mismatch");
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return corrupt(format!("unsupported version {version}"));
    }
    let hlen = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    if config_hash(&header.config) != header.config_hash {
        return corrupt("config hash mismatch");
    }
    if let Some(exp) = expected {
        if let Some(field) = exp.first_difference(&header.config) {
            return Err(Error::ConfigMismatch { field });
        }
    }
    let mut params = ParamStore::new();
    for (name, shape) in &header.params {
        let t = r.tensor(&header.dtype, shape)?;
        params.add(name.clone(), t);
    }
    let adam = if header.has_moments {
        let mut read_all = || -> Result<Vec<Tensor<T>>> {
            header.params.iter().map(|(_, s)| r.tensor(&header.dtype, s)).collect()
        };
        let m = read_all()?;
        let v = read_all()?;
        let cfg = header.state.as_ref().map(|s| s.adam).unwrap_or_default();
        Some(Adam {
            cfg,
            m,
            v,
            t: header.adam_t,
        })
    } else {
        None
    };
    if r.pos != body.len() {
        return corrupt("trailing bytes after payload");
    }
    Ok(Checkpoint {
        config: header.config,
        params,
        adam,
        state: header.state,
    })
}

impl<T: Scalar> Checkpoint<T> {
    /// Rebuilds the network and checks that stored names and shapes match it.
    pub fn restore_model(&self) -> Result<(Mphm, ParamStore<T>)> {
        let (model, mut store) = Mphm::build::<T>(&self.config, 0)?;
        store.load_from(&self.params)?;
        Ok((model, store))
    }
}
