use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing frame file: {0}")]
    MissingFrame(PathBuf),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad camera: {0}")]
    BadCamera(String),

    #[error("bad argument: {0}")]
    BadArgument(String),

    #[error("bad parameters: {0}")]
    BadParams(String),

    #[error("labels are not binary")]
    BadLabels,

    #[error("contextual attention has no valid background patch")]
    NoBackground,

    #[error("bad sequence: {0}")]
    BadSequence(String),

    #[error("loss has no valid pixel")]
    EmptyLossSupport,

    #[error("metric region is empty")]
    EmptyRegion,

    #[error("dataset is empty")]
    NoData,

    #[error("non-finite {component} at iteration {iteration}")]
    NonFinite { iteration: usize, component: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// True when the error stems from bad input data or usage rather than a
    /// failure inside the pipeline itself.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFinite { .. })
    }
}
