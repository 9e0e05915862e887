use thiserror::Error;

/// Errors raised anywhere in the pruning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("impossible state: {0}")]
    ImpossibleState(String),

    #[error("trace format error: {0}")]
    Format(String),

    #[error("enumeration of {bits} unknown bits exceeds the budget of {budget}")]
    EnumerationTooLarge { bits: u32, budget: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Protocol(_) => "protocol",
            Error::ImpossibleState(_) => "impossible_state",
            Error::Format(_) => "format",
            Error::EnumerationTooLarge { .. } => "enumeration_too_large",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
