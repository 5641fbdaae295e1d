use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid probability map: {0}")]
    InvalidDistribution(String),

    #[error("layer pairing: {0}")]
    Pairing(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset layout: {0}")]
    Layout(String),

    #[error("image without mask: {}", .0.display())]
    MissingMask(PathBuf),

    #[error("non-binary mask {}: {detail}", .path.display())]
    NonBinaryMask { path: PathBuf, detail: String },

    #[error("corrupt checkpoint {}: {detail}", .path.display())]
    CorruptCheckpoint { path: PathBuf, detail: String },

    #[error("unsupported layer for FLOP counting: {0}")]
    UnknownLayer(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
