//! Image-to-image MLP-mixer networks on a small reverse-mode autodiff core,
//! with denoising, compressive-sensing and untrained-fit pipelines.

pub mod autodiff;
pub mod bench;
pub mod bias;
pub mod cs;
pub mod data;
pub mod denoise;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
mod kernels;
pub mod models;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod serialize;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use models::{Family, ModelConfig};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{BoundParams, ModelParams};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
