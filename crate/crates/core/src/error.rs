use thiserror::Error;

pub type Result<T, E = CdsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CdsError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("state error: {0}")]
    State(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("divergence at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CdsError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CdsError::Shape(msg.into())
    }

    /// Whether the error stems from user input (bad shapes, files, configs)
    /// rather than an internal fault.
    pub fn is_validation(&self) -> bool {
        !matches!(self, CdsError::State(_) | CdsError::Evaluation(_))
    }
}
