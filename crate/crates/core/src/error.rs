use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("checkpoint: bad magic bytes {found:?}, expected \"DMOE\"")]
    BadMagic { found: [u8; 4] },

    #[error("version mismatch: file has version {found}, reader supports version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: truncated file ({0})")]
    Truncated(String),

    #[error("checkpoint: malformed record: {0}")]
    MalformedRecord(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("undefined value: {0}")]
    Undefined(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[cfg(feature = "io")]
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
