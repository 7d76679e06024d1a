use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("separation detected: coefficient norm {norm:.3} exceeds {limit}")]
    SeparationDetected { norm: f64, limit: f64 },

    #[error("hessian is singular")]
    SingularHessian,

    #[error("not converged after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("fit has not converged")]
    UnconvergedFit,

    #[error("no candidate models")]
    EmptyCandidates,

    #[error("dimension {dim} exceeds the supported maximum {max}")]
    DimensionTooLarge { dim: usize, max: usize },

    #[error("quadrature did not converge (last change {change:.3e} at {nodes} nodes)")]
    QuadratureNotConverged { nodes: usize, change: f64 },

    #[error("node {0} appears in its own neighborhood")]
    SelfNeighborhood(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("no rows left after dropping incomplete observations")]
    EmptyAfterFiltering,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SeparationDetected { .. }
                | Error::SingularHessian
                | Error::NotConverged { .. }
                | Error::UnconvergedFit
                | Error::QuadratureNotConverged { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
