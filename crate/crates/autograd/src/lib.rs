//! Reverse-mode automatic differentiation over dense `f32`/`f64` tensors.
//!
//! The crate is intentionally small: a [`Graph`] records the forward pass of
//! one training step, [`Graph::backward`] walks it in reverse and deposits
//! parameter gradients into a [`ParamStore`]. The layer set is exactly what a
//! convolutional U-Net and an SRResNet-style network need.

mod ckpt;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod layers;
mod optim;
mod params;
mod real;
pub mod rng;
mod tensor;

pub use ckpt::{read_checkpoint, write_checkpoint, NamedTensor};
pub use error::{NnError, Result};
pub use graph::{Grads, Graph, Var};
pub use optim::{Adam, AdamConfig, CosineLr};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::{gemm, Real};
pub use tensor::Tensor;
