use std::path::PathBuf;

use crate::denoiser::DenoiserParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {message} (residual {residual:.3e})")]
    Numerical { message: String, residual: f64 },

    #[error("matrix is not positive definite (pivot {pivot})")]
    Definiteness { pivot: usize },

    #[error("invalid parameter: {0}")]
    Validation(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("schedule calibration failed: {0}")]
    Calibration(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged {
        step: usize,
        last_valid: Box<DenoiserParams>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code used by the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Config(_)
            | Error::Dimension(_)
            | Error::Contract(_)
            | Error::Format(_)
            | Error::Data(_)
            | Error::Json(_) => 2,
            Error::MissingArtifact(_) | Error::Io(_) => 3,
            Error::Numerical { .. }
            | Error::Definiteness { .. }
            | Error::Calibration(_)
            | Error::TrainingDiverged { .. } => 4,
        }
    }
}
