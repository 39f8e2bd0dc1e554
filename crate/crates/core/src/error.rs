use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("diagonal entry {index} = {value:e} is not positive")]
    DegenerateDiagonal { index: usize, value: f64 },
    #[error("result of {rows}x{cols} exceeds the size limit")]
    TooLarge { rows: usize, cols: usize },
    #[error("eigenvalue range violates 0 < lam_min <= 1 <= lam_max: [{lam_min}, {lam_max}]")]
    InvalidEigenRange { lam_min: f64, lam_max: f64 },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("forward tape was recorded on different weights")]
    StaleTape,
    #[error("empty batch")]
    EmptyBatch,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("weight sampling stalled: {accepted} accepted out of {draws} draws")]
    SamplingStalled { accepted: usize, draws: usize },
    #[error("zero empirical variance at coordinate {index}")]
    DegenerateVariance { index: usize },
    #[error("layer {layer} has zero spectral norm")]
    DegenerateLayer { layer: usize },
    #[error("missing correlation statistics for layer {layer}")]
    IncompleteStats { layer: usize },
    #[error("margin gamma must be positive, got {0}")]
    InvalidMargin(f64),
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    DivergedTraining { epoch: usize, step: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
