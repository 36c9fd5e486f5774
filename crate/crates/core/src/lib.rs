//! Multi-model super-resolution: a bank of class-specific SR networks whose
//! outputs are combined by a small learned fusion network.

pub mod checkpoint;
pub mod data;
pub mod degradation;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod sr;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Gradients, Tape, Tensor, TensorId, Var};

/// Single precision, used for training and inference.
pub type Tensor32 = Tensor<f32>;
/// Double precision, used by gradient checks.
pub type Tensor64 = Tensor<f64>;
pub type SrModel32 = sr::SrModel<f32>;
pub type SrModel64 = sr::SrModel<f64>;
pub type ModelBank32 = sr::ModelBank<f32>;
pub type FusionNet32 = fusion::FusionNet<f32>;
pub type FusionNet64 = fusion::FusionNet<f64>;
pub type ClassDataset32 = data::ClassDataset<f32>;
