//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad header in {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("payload size mismatch: header declares {expected} values, payload holds {actual}")]
    PayloadSize { expected: usize, actual: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("dimension mismatch in {what}: {lhs:?} vs {rhs:?}")]
    DimsMismatch {
        what: String,
        lhs: [usize; 3],
        rhs: [usize; 3],
    },

    #[error("grid_dim must be ≥ 2 (got {got})")]
    GridTooCoarse { got: usize },

    #[error("grid_dim {grid} exceeds image_dim {image}")]
    GridTooFine { grid: usize, image: usize },

    #[error("cubic B-spline needs grid_dim ≥ 4 along every axis (got {got})")]
    BsplineSupport { got: usize },

    #[error("landmark file {path} line {line}: {reason}")]
    Landmark {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("landmark {id} at {point:?} is outside volume bounds {dims:?}")]
    LandmarkOutOfBounds {
        id: String,
        point: [f64; 3],
        dims: [usize; 3],
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite loss in term `{term}` at iteration {iteration}")]
    NonFiniteLoss { term: String, iteration: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
