//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violated one or more sample invariants. Every violation
    /// found is listed, not just the first.
    #[error("invalid sample:\n  {}", issues.join("\n  "))]
    Validation { issues: Vec<String> },

    /// A design matrix failed the pivoted-QR rank check. `column` is the
    /// zero-based index of the offending column in the caller's design.
    #[error("design matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },

    /// The instrument moment matrix Z'X is numerically singular.
    #[error("instrument moment matrix Z'X is singular (weak or collinear instrument)")]
    SingularMoments,

    /// The estimated take-up gap is too close to zero for the ratio
    /// estimator to be meaningful.
    #[error("weak first stage: phi(1) = {phi1}, phi(0) = {phi0}, |gap| = {gap:e}")]
    WeakFirstStage { phi1: f64, phi0: f64, gap: f64 },

    /// Exactly half the units must be assigned to treatment.
    #[error("assignment is unbalanced: {treated} treated vs {control} control units")]
    UnbalancedAssignment { treated: usize, control: usize },

    /// A pair structure does not partition the sample.
    #[error("invalid pairing: {0}")]
    InvalidPairing(String),

    /// Pairs that do not contain exactly one treated unit, by label.
    #[error("pairs without exactly one treated unit: {0:?}")]
    PairsNotOneTreated(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(issues: Vec<String>) -> Self {
        Error::Validation { issues }
    }
}
