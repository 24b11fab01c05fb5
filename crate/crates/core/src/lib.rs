//! Recurrent convolutional networks for recognising partially occluded objects.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense NHWC tensors and the differentiable layer primitives
//!   (convolution, transposed convolution, max-pooling, batch norm, LRN,
//!   ReLU, dense softmax), each with a hand-written backward pass.
//! - [`network`]: the six two-hidden-layer architectures (B, B-F, B-K, BT,
//!   BL, BLT), the unrolled forward pass, backpropagation through time and
//!   the checkpoint format.
//! - [`scenegen`]: MNIST IDX loading and the occluded stereo scene generator
//!   with its fixed-record shard format.
//! - [`training`]: time-summed loss, adam and the mini-batch training loop.
//! - [`evalstats`]: last-step evaluation, McNemar tests, Benjamini–Hochberg
//!   FDR control and the softmax time-course analysis.

pub mod error;
pub mod evalstats;
pub mod network;
pub mod scenegen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

pub use network::{ModelSpec, NetworkParams, Preset, UnrollTrace};
pub use tensor::{Scalar, Shape, Tensor};
