use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CsadError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CsadError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("length mismatch in {what}: header promises {expected} bytes, found {found}")]
    LengthMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("capacity error in experience {experience}: need {needed} anomalies from classes {classes:?}, only {available} left")]
    Capacity {
        experience: usize,
        classes: Vec<u8>,
        needed: usize,
        available: usize,
    },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at experience {experience}, epoch {epoch}: {detail}")]
    Divergence {
        experience: usize,
        epoch: usize,
        detail: String,
    },

    #[error("weibull fit impossible: {0}")]
    FitImpossible(String),

    #[error("degenerate weibull fit: {0}")]
    DegenerateFit(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("config error: {0}")]
    Config(String),
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

impl CsadError {
    /// Process exit code for this error: 2 config, 3 data, 4 training
    /// divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CsadError::Config(_) | CsadError::Validation(_) => EXIT_CONFIG,
            CsadError::Io { .. }
            | CsadError::Format { .. }
            | CsadError::LengthMismatch { .. }
            | CsadError::Capacity { .. }
            | CsadError::Stratification(_) => EXIT_DATA,
            CsadError::Divergence { .. } | CsadError::Numeric(_) => EXIT_DIVERGENCE,
            CsadError::FitImpossible(_) | CsadError::DegenerateFit(_) | CsadError::UndefinedAuc(_) => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CsadError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        CsadError::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
