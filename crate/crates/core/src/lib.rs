//! Conditional diffusion downscaling of gridded climate fields.

// `!(x > 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod config;
pub mod datagen;
pub mod denoiser;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod field;
pub mod pipeline;
pub mod resample;
pub mod roles;
pub mod schedule;
pub mod unet;

pub use error::{Error, Result};
pub use field::Field;
