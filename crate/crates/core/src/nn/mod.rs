//! Float network: layers, the five-block CNN, hand-derived backpropagation and
//! Adam. Everything is generic over [`Real`](crate::Real).
//!
//! Batched activations are kept channel-major (`[C][N][H][W]`) so a 3x3 same
//! convolution over a whole minibatch is one im2col plus one GEMM.

mod adam;
mod layers;
mod model;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use layers::{
    batchnorm_forward, bce_loss, conv2d_forward, dense_forward, dropout_forward, relu, sigmoid,
    BatchNorm, Conv2d, Dense, BCE_EPSILON,
};
pub use model::{
    ArchConfig, CnnModel, ConvBlock, ForwardPass, Gradients, Mode, SiteMaxima, Workspace,
};
pub use tensor::Tensor;

