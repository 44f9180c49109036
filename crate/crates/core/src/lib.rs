//! Multi-scale camouflaged object detection: image pyramid, scale-attention
//! fusion, grouped refinement units with recursive feedback decoding, the
//! BCE plus uncertainty training loss and the standard evaluation metrics.
//!
//! Everything runs on 64-bit CPU tensors with a small reverse-mode autodiff
//! tape, which keeps every layer checkable against finite differences.

pub mod absiu;
pub mod archive;
pub mod autograd;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod mgfu;
pub mod model;
pub mod nn;
pub mod ops;
pub mod pyramid;
pub mod tensor;

pub use error::{CodError, Result};
pub use tensor::Tensor;
