//! Deep evolutionary face alignment on 3D diffusion heat maps.
//!
//! The crate is organised bottom-up:
//!
//! - [`morphable_model`]: linear 3D landmark model and weak-perspective projection
//! - [`diffusion_heatmap`]: 3-channel normalized-coordinate heat maps
//! - [`tensor_nn`]: convolution / dense kernels with exact backward passes, Adam,
//!   and the multiply-accumulate cost model
//! - [`evolutionary_rnn`]: the vanilla parameter-space RNN and the factorized
//!   feature-space recurrent cell
//! - [`alignment_pipeline`]: classic and fast networks, synthetic data, training
//! - [`evaluation`]: NME / CED metrics, pose-binned reports, benchmarking
//! - [`cli`]: the `evodhm` command-line front end

pub mod alignment_pipeline;
pub mod cli;
pub mod diffusion_heatmap;
pub mod error;
pub mod evaluation;
pub mod evolutionary_rnn;
pub mod morphable_model;
pub mod serialization;
pub mod tensor_nn;

pub use error::{Error, Result};
