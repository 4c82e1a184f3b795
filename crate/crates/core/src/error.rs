use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, mismatched channel counts, malformed config.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A file was readable but its contents are malformed.
    #[error("{path}: {msg} (at byte offset {offset})")]
    Format {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error("{path}: unsupported {format} version `{found}`")]
    UnsupportedVersion {
        path: String,
        format: &'static str,
        found: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &str, offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::NonFinite(_) => 2,
            Error::Format { .. } | Error::UnsupportedVersion { .. } | Error::Io { .. } => 3,
            Error::UndefinedMetric(_) => 4,
        }
    }
}
