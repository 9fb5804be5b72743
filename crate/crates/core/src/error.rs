use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("image {id} is {height}x{width}, smaller than the {patch}x{patch} patch")]
    ImageTooSmall {
        id: String,
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("need at least {needed} image pairs, have {available}")]
    InsufficientPairs { needed: usize, available: usize },

    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(f64),

    #[error("degenerate image: {0}")]
    DegenerateImage(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("{0} out of range")]
    OutOfRange(String),

    #[error("training set is empty")]
    EmptyDataset,

    #[error("patch {0} has no saliency mask")]
    MissingMask(usize),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersionMismatch { found: u32, expected: u32 },

    #[error("no reports to plot")]
    EmptyReport,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the command line front end:
    /// 2 configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFiniteLoss { .. } | Error::NonFinite(_) | Error::Shape(_) => 4,
            _ => 3,
        }
    }
}
