use thiserror::Error;

/// Errors produced by the estimation and resampling routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The fit could not produce usable estimates. The parameter trace up to
    /// the failure point is kept for diagnostics.
    #[error("estimation failed: {reason}")]
    EstimationFailure { reason: String, trace: Vec<Vec<f64>> },

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("sampler failure: {0}")]
    SamplerFailure(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: String, message: String },

    /// An artifact that must be produced by an earlier step is absent.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("unknown scenario `{name}`; available: {available}")]
    UnknownScenario { name: String, available: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
