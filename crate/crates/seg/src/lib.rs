pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gemm;
pub mod inference;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Single-precision network used by the pipeline.
pub type Network = model::FcDenseNet<f32>;
/// Double-precision network, used for gradient checks.
pub type NetworkF64 = model::FcDenseNet<f64>;
