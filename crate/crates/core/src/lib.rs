//! Lightweight CAN intrusion detection: synthetic traffic, windowed CAN-ID
//! features, a small convolutional classifier, and an int8 inference engine.
//!
//! The numeric core ([`nn`], [`quant::fold_batchnorm`], [`quant::calibrate`],
//! [`eval::metrics`]) is generic over the scalar type. Training runs in `f32`,
//! gradient checks in `f64`, and the published confusion-matrix metrics can be
//! recomputed exactly with [`Exact`].

pub mod bench;
pub mod canbus;
pub mod error;
pub mod eval;
pub mod features;
pub mod model_io;
pub mod nn;
pub mod quant;
pub mod scalar;
pub mod trafgen;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

/// Model precision used for training, checkpoints and float inference.
pub type Model = nn::CnnModel<f32>;
/// Double-precision model, used by the gradient-check harness.
pub type Model64 = nn::CnnModel<f64>;
/// Float tensor at training precision.
pub type Tensor = nn::Tensor<f32>;
/// Float tensor in double precision.
pub type Tensor64 = nn::Tensor<f64>;
/// Adam state at training precision.
pub type AdamState = nn::AdamState<f32>;
/// Exact rational scalar for metric arithmetic.
pub type Exact = num_rational::Ratio<u64>;
