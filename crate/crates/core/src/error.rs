use std::path::PathBuf;

/// Errors produced anywhere in the segmentation toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter or input violates its documented domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("histogram masses differ: {0} vs {1}")]
    MassMismatch(f64, f64),

    #[error("sinkhorn did not reach tolerance after {iterations} iterations (violation {violation:e})")]
    NotConverged { iterations: usize, violation: f64 },

    #[error("step sizes violate the convergence rule: {0}")]
    StepSize(String),

    #[error("solver aborted at iteration {iter}: {reason}")]
    SolverAbort { iter: usize, reason: String },

    #[error("invalid scribbles: {0}")]
    Scribbles(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    /// True for errors caused by the job configuration rather than by the
    /// numerics or the environment.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::DimensionMismatch(_)
                | Error::MassMismatch(..)
                | Error::StepSize(_)
                | Error::Scribbles(_)
                | Error::Image { .. }
        )
    }

    /// True when the numerics gave up on an otherwise valid job.
    pub fn is_solver_abort(&self) -> bool {
        matches!(self, Error::SolverAbort { .. } | Error::NotConverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
