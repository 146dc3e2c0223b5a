//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A dataset entry has an image but no label file, or vice versa.
    #[error("dataset entry `{id}` has no matching {missing} file")]
    OrphanEntry { id: String, missing: &'static str },

    /// Label pixel values exceed the declared class count, or a file has the
    /// wrong pixel format.
    #[error("validation failed for `{id}`: {reason}")]
    Validation { id: String, reason: String },

    /// Bad run configuration (sizes that do not add up, non-positive lr, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or mask dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Episode sampling could not satisfy the request.
    #[error("cannot sample a {k}-shot episode for class {class}: {available} eligible images (need {needed})")]
    Sampling {
        class: u8,
        k: usize,
        available: usize,
        needed: usize,
    },

    /// A support mask with no foreground pixels.
    #[error("degenerate support: {0}")]
    DegenerateSupport(String),

    /// Binary container / embedding cache format violations.
    #[error("cache format error in `{path}`: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Frozen parameters changed fingerprint during a run.
    #[error("freeze violation: {component} fingerprint drifted (expected {expected}, found {found})")]
    FreezeViolation {
        component: &'static str,
        expected: String,
        found: String,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    /// Evaluation protocol violation (registry targets a train-fold class,
    /// shot mismatch, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on `{path}`: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
