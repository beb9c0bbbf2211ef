//! File formats, training loop, evaluation, ablations and the command line
//! for the `mlf-core` forecaster.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csvio;
pub mod error;
pub mod eval;
pub mod synth;
pub mod train;

pub use error::{AppError, Result};
