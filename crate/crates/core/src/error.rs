use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("unknown class '{name}' at row {row}")]
    UnknownClass { name: String, row: usize },

    #[error("duplicate image_path '{id}' at row {row}")]
    DuplicateImage { id: String, row: usize },

    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity error: {0}")]
    CheckpointIntegrity(String),

    #[error("invalid catalog: {0}")]
    Catalog(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row {row} not a probability vector")]
    NotProbability { row: usize },

    #[error("image already normalized")]
    AlreadyNormalized,

    #[error("image must not be normalized for this operation")]
    Normalized,

    #[error("degenerate perspective corners: {0}")]
    DegenerateCorners(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("alignment error: model '{model}' is missing image '{image}'")]
    MissingImage { model: String, image: String },

    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }
}
