//! Datasets for MPHM: PNG I/O, paired directories, synthetic rain and batching.

pub mod batch;
pub mod dataset;
pub mod error;
pub mod io;
pub mod scenes;
pub mod synth;

pub use batch::{batch_iter, Batch, BatchIter};
pub use dataset::{load_paired_dir, load_paired_root, PairedDataset, PairedSample};
pub use error::{DataError, Result};
pub use io::{load_png, save_png};
pub use synth::{synth_rain, RainParams};
