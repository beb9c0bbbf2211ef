//! Multi-period learning for time-series forecasting.
//!
//! Several right-aligned history windows of different lengths are each cut
//! into the same number of patches, embedded, squeezed, attended jointly with
//! inter-period redundancy filtering and finally merged by learned per-period
//! weights. Everything here is pure computation over `alloc` buffers; file
//! formats, timing and the command line live in the `mlf` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod lwi;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod patching;
pub mod squeeze;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{MlfError, Result};

pub use tensor::Tensor;
pub use data::Batch;
pub use model::{Ablation, ForecastBundle, MlfConfig, MlfModel};
