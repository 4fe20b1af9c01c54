use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operand has the wrong extent along `axis`.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// Training or attack produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Endpoint(#[from] crate::lingua::EndpointError),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
