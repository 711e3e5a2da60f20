use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    /// A loss term produced NaN or infinity during training.
    #[error("non-finite {term} at epoch {epoch}, iteration {iteration}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        iteration: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status for this error: 1 for invalid input or
    /// configuration, 2 for file-system and file-format problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) | Error::Shape(_) | Error::Index { .. } | Error::Config(_) => 1,
            Error::Io(_) | Error::Format(_) => 2,
            Error::Degenerate(_) | Error::NonFinite { .. } => 3,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
