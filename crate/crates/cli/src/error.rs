use mphm_data::DataError;
use thiserror::Error;

/// Failures grouped by the process exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<mphm_core::Error> for CliError {
    fn from(e: mphm_core::Error) -> Self {
        use mphm_core::Error as E;
        match e {
            E::Config(_) | E::ConfigMismatch { .. } => CliError::Config(e.to_string()),
            E::NonFinite { .. } => CliError::Numeric(e.to_string()),
            E::Shape(_) | E::Validation { .. } | E::CorruptCheckpoint(_) | E::Io(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => CliError::Config(m),
            DataError::Core(c) => c.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
