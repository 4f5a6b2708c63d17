use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or layouts that cannot be combined.
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid hyperparameters or toggles.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },
    #[error("validation error: expected {expected}, got {actual} ({what})")]
    Validation {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint config mismatch on field `{field}`")]
    ConfigMismatch { field: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
