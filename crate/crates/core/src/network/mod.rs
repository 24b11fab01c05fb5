//! The six two-hidden-layer architectures, their unrolled forward pass,
//! backpropagation through time and the checkpoint format.

mod bptt;
pub mod checkpoint;
mod params;
mod spec;
mod unroll;

pub use bptt::backward_bptt;
pub use checkpoint::{Checkpoint, NamedBlob};
pub use params::{sample_truncated_normal, HiddenParams, NetworkParams, ParamGrads, ParamView};
pub use spec::{ModelSpec, Preset, TOPDOWN_KERNEL};
pub use unroll::{argmax_rows, forward_unrolled, predict, UnrollTrace};
