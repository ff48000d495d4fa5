use thiserror::Error;

#[derive(Debug, Error)]
pub enum DbmdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced during {phase}")]
    NonFinite { phase: String },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DbmdError>;

impl DbmdError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DbmdError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, expected: (usize, usize), got: (usize, usize)) -> Self {
        DbmdError::Shape {
            op,
            expected: format!("{}x{}", expected.0, expected.1),
            got: format!("{}x{}", got.0, got.1),
        }
    }
}
