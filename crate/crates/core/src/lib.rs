pub mod augment;
pub mod autodiff;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod scalar;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision instantiations, used by the CLI and the oracles.
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamGroup64 = autodiff::ParamGroup<f64>;
pub type Params64 = engine::Params<f64>;
pub type Dataset64 = synthdata::Dataset<f64>;
pub type Checkpoint64 = synthdata::Checkpoint<f64>;

/// Single-precision instantiations.
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamGroup32 = autodiff::ParamGroup<f32>;
pub type Params32 = engine::Params<f32>;
pub type Dataset32 = synthdata::Dataset<f32>;
pub type Checkpoint32 = synthdata::Checkpoint<f32>;
