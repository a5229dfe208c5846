use thiserror::Error;

/// Errors raised by the engine and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on axis {axis}: expected {expected}, got {actual} ({context})")]
    ShapeMismatch {
        context: String,
        axis: usize,
        expected: usize,
        actual: usize,
    },

    #[error("rank mismatch: expected rank {expected}, got {actual} ({context})")]
    RankMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, axis: usize, expected: usize, actual: usize) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            axis,
            expected,
            actual,
        }
    }

    pub(crate) fn in_file(self, path: impl Into<std::path::PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn rank(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::RankMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}
