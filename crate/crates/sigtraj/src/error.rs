//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("target index {index} out of range for {n_targets} targets")]
    InvalidTargetIndex { index: usize, n_targets: usize },

    #[error("cohort is invalid: {0}")]
    InvalidCohort(String),

    #[error("optimization diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("personalization failed: {0}")]
    Personalization(String),

    #[error("predictor not applicable: {0}")]
    NotApplicable(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("cannot split {n} subjects into {k} folds")]
    TooFewSubjects { n: usize, k: usize },

    #[error("prediction/truth keys are not aligned: {0}")]
    AlignmentMismatch(String),

    #[error("scenario produced no scorable subjects: {0}")]
    EmptyScenario(String),

    #[error("empty sample set: {0}")]
    EmptySamples(String),
}
