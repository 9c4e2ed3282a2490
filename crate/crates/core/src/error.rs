use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("data length {got} does not match shape {shape:?}")]
    ShapeMismatch { shape: [usize; 3], got: usize },

    #[error("label {label} outside the allowed range 0..={max}")]
    InvalidLabel { label: u8, max: u8 },

    #[error("study `{0}` is not longitudinal: at least two timepoints are required")]
    NotLongitudinal(String),

    #[error("invalid study: {0}")]
    InvalidStudy(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("registration diverged: {0}")]
    Divergence(String),

    #[error("unsupported file content in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("nifti error for {path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: nifti::NiftiError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
