//! Minimal CPU neural-network stack: explicit forward/backward layers over
//! `ndarray` tensors, an Adam optimizer, and classification losses.
//!
//! Activations are `[batch, channels, height, width]`; fully-connected
//! layers run on `[batch, features, 1, 1]` so a whole model is one
//! homogeneous layer stack. Matrix products go through BLAS.

mod activation;
mod adam;
mod conv;
mod dense;
mod dropout;
pub mod init;
mod layer;
pub mod loss;
mod norm;
mod pool;
mod residual;

pub use activation::{Relu, Tanh};
pub use adam::Adam;
pub use conv::{Conv2d, ConvTranspose2d};
pub use dense::{Dense, Flatten};
pub use dropout::Dropout;
pub use layer::{Layer, Network, Param};
pub use norm::InstanceNorm;
pub use pool::MaxPool2d;
pub use residual::ResidualBlock;

/// Whether a forward pass is part of training (enables dropout) or inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a backward pass must produce.
///
/// `InputOnly` skips parameter-gradient accumulation; attacks that only
/// need the gradient with respect to the input use it to avoid the
/// weight-gradient matrix products.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    Full,
    InputOnly,
}
