//! Minimal reverse-mode differentiation over dense float64 tensors.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
