use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or hyperparameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// NaN/Inf produced or encountered; training and search abort on this.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse, e.g. calling backward on a value that is not a scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Broken engine invariant.
    #[error("internal error: {0}")]
    Internal(String),

    /// A JSON document failed schema validation; `path` is a JSON pointer.
    #[error("{path}: {message}")]
    Schema { path: String, message: String },

    /// A binary container is malformed.
    #[error("{format} file invalid at byte {offset}: {message}")]
    Format {
        format: &'static str,
        offset: u64,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numeric divergence rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
