use std::path::PathBuf;

/// Errors raised anywhere in the de-occlusion pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("canvas {height}×{width} is too small: {reason}")]
    Sizing {
        height: usize,
        width: usize,
        reason: String,
    },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid ratio distribution: {0}")]
    Distribution(String),
    #[error("no occluder placement within ±{tolerance} of target ratio {target} (best {best})")]
    Placement {
        target: f64,
        best: f64,
        tolerance: f64,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dataset(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Whether the error stems from bad user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Sizing { .. }
                | Error::Validation(_)
                | Error::Shape(_)
                | Error::Distribution(_)
                | Error::Config(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
