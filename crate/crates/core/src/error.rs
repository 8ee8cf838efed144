use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("window of {len} rows is shorter than the minimum of {min}")]
    WindowTooShort { len: usize, min: usize },

    #[error("design matrix restricted to the selected rows is rank deficient")]
    RankDeficientDesign,

    #[error("solver did not converge after {iterations} iterations (relative gap {gap:e})")]
    SolverNonConvergence { iterations: usize, gap: f64 },

    #[error("dataset has no second response series")]
    MissingZ,

    #[error("only {selected} exceedances selected, at least {min} required")]
    TooFewExceedances { selected: usize, min: usize },

    #[error("fit failed at grid index {index}: {source}")]
    AtGridIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{skipped} of {total} grid points unusable (more than 10%)")]
    TooManySkippedPoints { skipped: usize, total: usize },

    #[error("break-location grid is empty")]
    EmptyGrid,

    #[error("self-normalizer is numerically zero ({value:e})")]
    ZeroNormalizer { value: f64 },

    #[error("{redraws} of {replications} replications hit a zero denominator")]
    ZeroDenominator { redraws: usize, replications: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("root not bracketed in [{lo}, {hi}]")]
    RootNotBracketed { lo: f64, hi: f64 },

    #[error("table schema mismatch in {path}: {detail}")]
    SchemaMismatch { path: PathBuf, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_index(self, index: usize) -> Self {
        Error::AtGridIndex {
            index,
            source: Box::new(self),
        }
    }

    /// Strips grid-index annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtGridIndex { source, .. } => source.root(),
            e => e,
        }
    }
}
