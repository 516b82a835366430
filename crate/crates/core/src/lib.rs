//! Multi-instance video editing on a deterministic diffusion sampler.
//!
//! The pipeline inverts the source latents with DDIM, denoises each instance
//! in its own branch, fuses the branches, and finishes with a shared
//! denoising pass. Cross-attention is redistributed inside each instance mask
//! during the early steps. Pretrained networks are replaced by closed-form or
//! seeded toy predictors behind the [`predictor::Predictor`] trait.

// NaN must fail validation, so `!(x >= 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dms;
pub mod error;
pub mod io;
pub mod ipr;
pub mod metrics;
pub mod predictor;
pub mod schedule;

pub use error::{Error, ErrorClass, Result};
