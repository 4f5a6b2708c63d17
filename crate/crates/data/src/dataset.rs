//! Paired rainy/clean datasets, on disk or in memory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mphm_core::image::Image;
use mphm_core::Scalar;

use crate::error::{DataError, Result};
use crate::io::{load_png, png_dims};

#[derive(Debug, Clone)]
pub struct PairedSample<T> {
    pub rainy: Image<T>,
    pub clean: Image<T>,
    pub id: String,
}

#[derive(Debug, Clone)]
enum Entry<T> {
    File { id: String, rain: PathBuf, clean: PathBuf },
    Memory(PairedSample<T>),
}

/// Read-only list of pairs; files are decoded on access.
#[derive(Debug, Clone)]
pub struct PairedDataset<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> PairedDataset<T> {
    /// In-memory dataset; ids must be unique and dims must agree per pair.
    pub fn from_samples(samples: Vec<PairedSample<T>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.clone()) {
                return Err(DataError::Config(format!("duplicate sample id {}", s.id)));
            }
            if s.rainy.dims() != s.clean.dims() {
                return Err(DataError::DimMismatch {
                    file: s.id.clone(),
                    rain: s.rainy.dims(),
                    clean: s.clean.dims(),
                });
            }
        }
        Ok(Self {
            entries: samples.into_iter().map(Entry::Memory).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        match &self.entries[i] {
            Entry::File { id, .. } => id,
            Entry::Memory(s) => &s.id,
        }
    }

    pub fn ids(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.id(i).to_string()).collect()
    }

    pub fn get(&self, i: usize) -> Result<PairedSample<T>> {
        match &self.entries[i] {
            Entry::Memory(s) => Ok(s.clone()),
            Entry::File { id, rain, clean } => {
                let rainy = load_png(rain)?;
                let clean_img = load_png(clean)?;
                if rainy.dims() != clean_img.dims() {
                    return Err(DataError::DimMismatch {
                        file: id.clone(),
                        rain: rainy.dims(),
                        clean: clean_img.dims(),
                    });
                }
                Ok(PairedSample {
                    rainy,
                    clean: clean_img,
                    id: id.clone(),
                })
            }
        }
    }

    /// First `n` pairs.
    pub fn take(&self, n: usize) -> Self {
        Self {
            entries: self.entries.iter().take(n).cloned().collect(),
        }
    }
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let io = |source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let is_img = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"));
        if path.is_file() && is_img {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

/// Pairs files with identical names, sorted by name. Image headers are read
/// to validate dims; pixels are decoded lazily.
pub fn load_paired_dir<T: Scalar>(rain_dir: &Path, clean_dir: &Path) -> Result<PairedDataset<T>> {
    let rain = image_files(rain_dir)?;
    let clean = image_files(clean_dir)?;
    let rain_only: Vec<String> = rain.keys().filter(|k| !clean.contains_key(*k)).cloned().collect();
    let clean_only: Vec<String> = clean.keys().filter(|k| !rain.contains_key(*k)).cloned().collect();
    if !rain_only.is_empty() || !clean_only.is_empty() {
        return Err(DataError::Orphans { rain_only, clean_only });
    }
    if rain.is_empty() {
        return Err(DataError::Empty(rain_dir.to_path_buf()));
    }
    let mut entries = Vec::with_capacity(rain.len());
    for (name, rp) in rain {
        let cp = clean[&name].clone();
        let (dr, dc) = (png_dims(&rp)?, png_dims(&cp)?);
        if dr != dc {
            return Err(DataError::DimMismatch {
                file: name,
                rain: dr,
                clean: dc,
            });
        }
        let id = Path::new(&name)
            .file_stem()
            .map_or(name.clone(), |s| s.to_string_lossy().into_owned());
        entries.push(Entry::File {
            id,
            rain: rp,
            clean: cp,
        });
    }
    Ok(PairedDataset { entries })
}

/// `root/rain` paired with `root/norain`.
pub fn load_paired_root<T: Scalar>(root: &Path) -> Result<PairedDataset<T>> {
    load_paired_dir(&root.join("rain"), &root.join("norain"))
}
