use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("malformed run-length encoding: {0}")]
    Rle(String),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid prompt: {0}")]
    Prompt(String),
    #[error("invalid generator config: {0}")]
    Generator(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("overlapping predicted segments: {0}")]
    OverlappingSegments(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) => "invalid_shape",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InvalidBox(_) => "invalid_box",
            Error::Rle(_) => "rle",
            Error::Vocabulary(_) => "vocabulary",
            Error::Prompt(_) => "prompt",
            Error::Generator(_) => "generator",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::IndexOutOfRange(_) => "index_out_of_range",
            Error::OverlappingSegments(_) => "overlapping_segments",
            Error::Diverged { .. } => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::UnknownTask(_) => "unknown_task",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
