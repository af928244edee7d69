use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch norm in train mode needs more than one value per channel, got {0}")]
    DegenerateVariance(usize),

    #[error("non-scalar loss with {0} elements passed to backward")]
    NonScalarLoss(usize),

    #[error("function under gradient check is not deterministic")]
    NonDeterministic,

    #[error("at least one click is required")]
    NoClicks,

    #[error("click ({x}, {y}) lies outside a {width}x{height} image")]
    ClickOutOfBounds { x: i64, y: i64, width: usize, height: usize },

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("unknown partition `{0}`")]
    UnknownPartition(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing mask for image `{0}`")]
    MissingMask(String),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("config parse error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
