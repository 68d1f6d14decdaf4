use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("unpaired view {0}")]
    UnpairedView(String),

    #[error("no views found in {0}")]
    NoViews(PathBuf),

    #[error("unsupported camera model {0}")]
    UnsupportedCameraModel(String),

    #[error("COLMAP parse error: {0}")]
    Colmap(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate camera placement: {0}")]
    DegenerateCamera(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("attention score matrix of {elements} elements exceeds the budget of {budget}; reduce the window size or the number of scales")]
    AttentionBudget { elements: usize, budget: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint for setting {0}")]
    MissingCheckpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
