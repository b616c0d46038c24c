use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("index {index} out of range for dataset of {len} points")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("worker count {p} does not divide dataset size {n}")]
    NotDivisible { n: usize, p: usize },

    #[error("iterate for step {step} is not buffered (oldest {oldest}, newest {newest})")]
    MissingIterate {
        step: usize,
        oldest: usize,
        newest: usize,
    },

    #[error("inconsistent run: {0}")]
    Inconsistent(String),

    #[error("coupling violation: {0}")]
    Coupling(String),

    #[error("dataset has no generator to draw replacement points from")]
    NoGenerator,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}
