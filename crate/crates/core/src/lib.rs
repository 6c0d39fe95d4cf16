//! Few-shot segmentation with guided networks: a CPU tensor library with
//! reverse-mode autodiff, the guided model, episode synthesis, training and
//! evaluation. Numerics are generic over [`Scalar`] (`f32` or `f64`).

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod episodes;
pub mod gradcheck;
pub mod image;
pub mod labels;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{GuidanceConfig, ModelParams};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
