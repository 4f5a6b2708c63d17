//! Multi-prior hierarchical Mamba (MPHM) single-image deraining.
//!
//! The network, its autodiff engine, losses, metrics and optimizer are all
//! generic over [`Scalar`]; the aliases below fix the precision.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod hmm;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod pfi;
pub mod priors;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vssm;

pub use autograd::{Gradients, Graph, Var};
pub use backbone::{ModelConfig, Mphm};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Image32 = image::Image<f32>;
pub type Image64 = image::Image<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Trainer32 = train::Trainer<f32>;
