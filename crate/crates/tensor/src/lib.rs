//! Dense 64-bit tensors, the handful of primitives a small fully
//! convolutional network needs, a tape for reverse-mode differentiation,
//! an Adam optimizer and a flat binary container for checkpoints.
//!
//! Everything here is single-threaded and deterministic: the same inputs
//! always produce bit-identical outputs.

pub mod adam;
pub mod container;
mod error;
pub mod graph;
pub mod kernels;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use container::{read_container, write_container, Container, ContainerError, TensorEntry};
pub use error::TensorError;
pub use graph::{Gradients, Graph, NodeId};
pub use kernels::{conv2d, maxpool2d};
pub use tensor::Tensor;
