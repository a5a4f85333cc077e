use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
///
/// Variants split into two families: input/validation problems (bad files,
/// bad arguments) and numerical degeneracies (singular moment matrices,
/// unbounded CUE). [`Error::is_numerical`] tells them apart, which the CLI
/// maps to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: dates not strictly increasing at row {row} ({previous:?} then {current:?})")]
    DateOrder {
        path: PathBuf,
        row: usize,
        previous: String,
        current: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("returns and factors share no dates")]
    EmptyIntersection,

    #[error("date label formats differ between panels ({returns:?} vs {factors:?})")]
    FrequencyMismatch { returns: String, factors: String },

    #[error("unknown column {0:?}")]
    UnknownColumn(String),

    #[error("sample too small: T = {t}, need more than {needed}")]
    SampleTooSmall { t: usize, needed: usize },

    #[error("singular factor covariance (eigenvalue ratio {ratio:.3e})")]
    SingularFactorCovariance { ratio: f64 },

    #[error("singular residual covariance (condition number {condition:.3e})")]
    SingularOmega { condition: f64 },

    #[error("rank-deficient cross-section regressors (near-collinear columns {first} and {second})")]
    RankDeficient { first: usize, second: usize },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("CUE unbounded / premia not identified (eigenvector {eigvec:?})")]
    CueUnbounded { eigvec: Vec<f64> },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("malformed record file: {0}")]
    Format(String),
}

impl Error {
    /// True for numerical-degeneracy errors, false for input/validation errors.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularFactorCovariance { .. }
                | Error::SingularOmega { .. }
                | Error::RankDeficient { .. }
                | Error::NotPositiveDefinite(_)
                | Error::CueUnbounded { .. }
                | Error::Singular(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
