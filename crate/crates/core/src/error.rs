use std::path::PathBuf;

use thiserror::Error;

use crate::observables::CyclopsReport;

/// Errors produced anywhere in the tomography pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not Hermitian: max |A - A^dag| = {residual:e}")]
    NotHermitian { residual: f64 },

    #[error("trace deviates from one by {deviation:e}")]
    TraceNotOne { deviation: f64 },

    #[error("matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:e}")]
    NotPsd { min_eigenvalue: f64 },

    #[error("matrix has non-finite entries")]
    NonFinite,

    #[error("rotation axis is not a unit vector (|n| = {norm})")]
    NonUnitAxis { norm: f64 },

    #[error("time grid is empty")]
    EmptyGrid,

    #[error("time grid is not strictly increasing at index {index}")]
    NonMonotonicGrid { index: usize },

    #[error("traces are sampled on different time grids")]
    GridMismatch,

    #[error("metadata mismatch: {0}")]
    MetadataMismatch(String),

    #[error("no spectral peak found in the traces")]
    NoSpectralPeak,

    #[error("degenerate fit design: {0}")]
    SingularDesign(String),

    #[error("linear system is singular: smallest singular value {min_singular_value:e} (largest {max_singular_value:e})")]
    SingularSystem {
        min_singular_value: f64,
        max_singular_value: f64,
    },

    #[error("coefficient matrix has rank {rank} < 8")]
    RankDeficient { rank: usize },

    #[error("observable set violates the CYCLOPS sign identities:\n{0}")]
    CyclopsConventionMismatch(Box<CyclopsReport>),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("perturbation bound invalid: kappa * |dC|/|C| = {product} >= 1")]
    BoundInvalid { product: f64 },

    #[error("Voigt absorptive part too close to zero ({value:e})")]
    DivisionNearZero { value: f64 },

    #[error("photodetector voltages must be positive")]
    NonPositiveVoltage,

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("oscillation amplitude {amplitude:e} is below five standard errors ({stderr:e})")]
    AmplitudeNearZero { amplitude: f64, stderr: f64 },

    #[error("detuning range is empty")]
    EmptyRange,

    #[error("repetition budget {budget} is smaller than the number of rows {rows}")]
    BudgetTooSmall { budget: usize, rows: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
