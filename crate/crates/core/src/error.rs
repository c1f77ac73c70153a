use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants are grouped by who is at fault: malformed input (`Validation`),
/// a caller breaking an operation's precondition (`Contract`), a chain whose
/// structure makes the question ill-posed (`Structural`), or the numerics
/// giving up (`Numeric`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("structural error at state {state}: {reason}")]
    Structural { state: String, reason: String },

    #[error("numeric error: {reason} (condition estimate {condition:.3e})")]
    Numeric { reason: String, condition: f64 },

    #[error("protocol error at node {node}: {reason}")]
    Protocol { node: usize, reason: String },

    #[error("topology generation failed: {reason}")]
    Generation { reason: String, unreachable: Vec<usize> },

    #[error("iteration cap of {cap} reached: {detail}")]
    NonConvergence { cap: u64, detail: String },

    #[error("enumeration refused: {count} controllable transitions exceeds cap of {cap}")]
    EnumerationCap { count: usize, cap: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by bad input files or arguments.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Contract(_)
                | Error::EnumerationCap { .. }
                | Error::Json(_)
                | Error::Io(_)
                | Error::Generation { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
