//! Probabilistic modeling of progressive disease trajectories.
//!
//! The generative model places a latent sigmoid progression curve behind each
//! time-varying clinical target. A subject's curve is parameterized by a shared
//! slope and per-target inflection ages, both drawn from Gaussian priors whose
//! means are linear in the subject's fixed attributes. Observed scores are
//! noisy affine readouts of the latent state.
//!
//! The crate provides:
//!
//! - [`model`]: the generative densities and their partial derivatives
//! - [`inference`]: variational training via reparameterized Monte Carlo
//!   gradients of the evidence lower bound
//! - [`prediction`]: prior-based and history-personalized forecasting by
//!   ancestral sampling
//! - [`benchmarks`]: stratified sigmoid fits, a linear mixed-effects model,
//!   and subject-level linear extrapolation
//! - [`synthesis`]: synthetic cohort generation with irregular visits,
//!   dropout, and missing targets
//! - [`evaluation`]: cross-validation splits, scenario protocols, MAE, and a
//!   subject-level paired permutation test
//! - [`analysis`]: inflection-point density estimates, mean latent curves,
//!   risk-factor effect tables, and personalized trajectory exports
//!
//! All randomized operations take explicit seeds or RNGs and are reproducible
//! bit-for-bit. File formats and the command-line interface live in the
//! companion `sigtraj-cli` crate.

pub mod analysis;
pub mod benchmarks;
pub mod cohort;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
mod optim;
pub mod prediction;
pub mod synthesis;

pub use cohort::{AttributeMeta, Cohort, CohortMeta, Polarity, SubjectRecord, TargetMeta, Visit};
pub use error::{Error, Result};
pub use inference::{train, train_validated, TrainConfig, TrainFit, VariationalState};
pub use model::{LatentState, ModelParams, SubjectAttributes, TargetObservation};
pub use prediction::{forecast, personalize, History, PosteriorForecast};
pub use synthesis::{generate_cohort, SynthConfig};

pub(crate) fn mix_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer; used to derive independent named streams from one seed
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
