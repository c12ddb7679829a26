//! Routed selective state-space language model with a fixed pool of
//! shared and expert filters, hand-written gradients and the diagnostics
//! used to inspect its filter bank.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod analysis;
pub mod block;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod ops;
pub mod router;
pub mod scalar;
pub mod ssm;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelParams};
pub use router::{RouterConfig, RouterMode};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
