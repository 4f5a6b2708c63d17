use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("unpaired files: only in rain dir {rain_only:?}, only in clean dir {clean_only:?}")]
    Orphans {
        rain_only: Vec<String>,
        clean_only: Vec<String>,
    },
    #[error("dimension mismatch for {file}: rain {rain:?}, clean {clean:?}")]
    DimMismatch {
        file: String,
        rain: (usize, usize),
        clean: (usize, usize),
    },
    #[error("dataset in {0} is empty")]
    Empty(PathBuf),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] mphm_core::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;
