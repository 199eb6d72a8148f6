use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input tensor does not have the shape an operation requires.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Geometry or hyper-parameters that cannot produce a valid result.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (files, labels, manifests).
    #[error("data error: {0}")]
    Data(String),

    /// API misuse, e.g. running backward twice on one graph.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values or a failed numerical tolerance.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
