//! Training engine for masked diffusion language models with
//! reinforcement learning from denoising feedback.
//!
//! The crate is generic over the scalar type via [`scalar::Real`]; training
//! paths default to `f64` ([`DefaultScalar`]).

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod logs;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod rollout;
pub mod scalar;
pub mod tape;
pub mod tasks;
pub mod trainer;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Real;

/// Scalar used on all training paths.
pub type DefaultScalar = f64;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
