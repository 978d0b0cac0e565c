use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An internal invariant was broken, e.g. a cluster center missing from its own positive set.
    #[error("internal consistency: {0}")]
    Consistency(String),

    #[error("average precision undefined: no ground truth of class {0}")]
    UndefinedAp(usize),

    #[error("numerical failure at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, OpisError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(OpisError::InvalidInput(msg.into()))
}
