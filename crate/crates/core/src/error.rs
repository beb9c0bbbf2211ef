use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T, E = MlfError> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MlfError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

impl MlfError {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        MlfError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        MlfError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> Self {
        MlfError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }
}
