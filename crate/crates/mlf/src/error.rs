use std::path::PathBuf;

use mlf_core::MlfError;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}, column {column}: {reason}")]
    Csv {
        path: PathBuf,
        row: usize,
        column: usize,
        reason: String,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid config at `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] MlfError),
}

impl AppError {
    /// Stable machine-readable code printed with every CLI error.
    pub fn code(&self) -> &'static str {
        match self {
            AppError::Io { .. } => "E_IO",
            AppError::Csv { .. } | AppError::Format { .. } => "E_DATA",
            AppError::Config { .. } => "E_CONFIG",
            AppError::Usage(_) => "E_USAGE",
            AppError::Core(e) => match e {
                MlfError::InvalidConfig { .. } => "E_CONFIG",
                MlfError::Data(_) | MlfError::DegenerateInput(_) => "E_DATA",
                MlfError::Diverged { .. } | MlfError::NonFinite { .. } => "E_DIVERGED",
                MlfError::UndefinedMetric(_) => "E_METRIC",
                MlfError::UnknownParameter(_) => "E_CHECKPOINT",
                _ => "E_SHAPE",
            },
        }
    }

    /// Process exit status for the code.
    pub fn exit_status(&self) -> i32 {
        match self.code() {
            "E_USAGE" => 2,
            "E_IO" => 3,
            "E_DATA" => 4,
            "E_CONFIG" => 5,
            "E_DIVERGED" => 6,
            "E_CHECKPOINT" => 7,
            "E_METRIC" => 8,
            _ => 9,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;
