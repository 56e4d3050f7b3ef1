use std::path::PathBuf;

use thiserror::Error;

use crate::volume::Shape;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed NIfTI header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("non-3D payload in {path}: {dims} dimensions")]
    NonThreeDPayload { path: PathBuf, dims: usize },
    #[error("cannot write {path}: {reason}")]
    Unwritable { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Shape, found: Shape },
    #[error("resolution mismatch: model expects {expected:?}, volume is {found:?}")]
    ResolutionMismatch { expected: Shape, found: Shape },
    #[error("shape {shape:?} is not divisible by patch splits {splits:?}")]
    IndivisibleShape { shape: Shape, splits: [usize; 3] },
    #[error("expected {expected} patches, found {found}")]
    PatchCount { expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("SSIM window {window} does not fit volume of shape {shape:?}")]
    WindowTooLarge { window: usize, shape: Shape },
    #[error("shape {shape:?} is too small for {scales} MS-SSIM scales")]
    InsufficientResolution { shape: Shape, scales: usize },

    #[error("non-finite {term} loss at batch {batch} of epoch {epoch}")]
    NonFiniteLoss { term: &'static str, epoch: usize, batch: usize },
    #[error("unknown layer id `{0}`")]
    UnknownLayer(String),
    #[error("classification: {0}")]
    Classification(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
