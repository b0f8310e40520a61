use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lidar spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scene generation failed: {0}")]
    SceneGeneration(String),

    #[error("malformed {what} at byte offset {offset}: {reason}")]
    Format {
        what: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("malformed JSON in {what} at path `{path}`: {reason}")]
    Json {
        what: &'static str,
        path: String,
        reason: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "invalid_spec",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape_mismatch",
            Error::SceneGeneration(_) => "scene_generation",
            Error::Format { .. } => "malformed_binary",
            Error::Json { .. } => "malformed_json",
            Error::Io { .. } => "io",
        }
    }
}
