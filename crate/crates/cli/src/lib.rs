//! Command-line harness for MPHM deraining: configuration, training,
//! evaluation, inference, ablations and visualizations.

pub mod ablate;
pub mod alloc;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod train;
pub mod visualize;

pub use config::RunConfig;
pub use error::{CliError, Result};
