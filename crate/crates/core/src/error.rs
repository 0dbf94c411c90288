use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories surfaced by every stage of the attack pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("malformed {format} data: {reason}")]
    Malformed { format: &'static str, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("missing upstream artifact from stage `{stage}`: {path}")]
    MissingStage { stage: &'static str, path: PathBuf },

    #[error("all {0} restarts failed")]
    AllRestartsFailed(usize),

    #[error("{0}")]
    Empty(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Malformed {
            format,
            reason: reason.into(),
        }
    }

    /// Coarse category used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::UnknownDataset(_)
            | Error::InvalidSplit(_)
            | Error::Malformed { .. }
            | Error::Io { .. }
            | Error::Image(_)
            | Error::Csv(_) => ErrorCategory::Data,
            Error::Config(_) | Error::Json(_) | Error::Yaml(_) => ErrorCategory::Config,
            Error::MissingStage { .. } => ErrorCategory::Dependency,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::AllRestartsFailed(_) => {
                ErrorCategory::Numerical
            }
            Error::ShapeMismatch { .. }
            | Error::LabelOutOfRange { .. }
            | Error::Empty(_)
            | Error::Tensor(_) => ErrorCategory::Contract,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Dependency,
    Numerical,
    Contract,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Dependency => 3,
            ErrorCategory::Data => 4,
            ErrorCategory::Numerical => 5,
            ErrorCategory::Contract => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Dependency => "dependency",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Contract => "contract",
        }
    }
}
