use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A run or generator was configured with values outside their domain.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input value violates a type invariant or operation precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// The language-model backend failed or returned something unusable.
    #[error("backend error: {0}")]
    Backend(String),

    /// A session operation was attempted in the wrong phase.
    #[error("phase error: {0}")]
    Phase(String),

    /// Encoded text could not be parsed back into a stimulus.
    #[error("parse error: {0}")]
    Parse(String),

    /// Every paired difference was zero, so a signed-rank test is undefined.
    #[error("no signal: all paired differences are zero")]
    NoSignal,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Validation(_) | Error::Parse(_) | Error::NoSignal
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
