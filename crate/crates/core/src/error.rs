use std::path::PathBuf;

use sags_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SagsError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("training error at iteration {iteration} ({group}): {message}")]
    Training {
        iteration: usize,
        group: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported camera model `{0}` (only PINHOLE and SIMPLE_PINHOLE)")]
    UnsupportedCameraModel(String),

    #[error("missing image file {0}")]
    MissingImage(PathBuf),

    #[error("checkpoint error at byte {offset}: {message}")]
    Checkpoint { offset: usize, message: String },

    #[error("image error: {0}")]
    Image(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

impl SagsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used by the CLI's machine-readable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            SagsError::Argument(_) => "argument",
            SagsError::Config(_) => "config",
            SagsError::Tensor(_) => "tensor",
            SagsError::Training { .. } => "training",
            SagsError::Io { .. } => "io",
            SagsError::Parse { .. } => "parse",
            SagsError::UnsupportedCameraModel(_) => "unsupported_camera_model",
            SagsError::MissingImage(_) => "missing_image",
            SagsError::Checkpoint { .. } => "checkpoint",
            SagsError::Image(_) => "image",
            SagsError::Contract(_) => "contract",
        }
    }
}

pub type Result<T, E = SagsError> = std::result::Result<T, E>;
