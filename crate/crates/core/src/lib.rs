//! Differentially private release of n-gram distributions.
//!
//! The library aggregates per-user n-gram counts, blends them with counts
//! from a public corpus in log space, and releases a probability
//! distribution over the vocabulary under user-level differential privacy.
//! The main release path calibrates Gaussian noise to the exact worst-case
//! effect of removing one user; Laplace, prior-weighted Laplace, and
//! k-anonymity baselines plus evaluation and attack harnesses are included
//! for comparison.
//!
//! Everything is deterministic given a root seed: noise draws, user splits,
//! and synthetic data all derive their randomness from labeled child seeds.

pub mod counts;
pub mod error;
pub mod eval;
pub mod mechanisms;
pub mod seed;
pub mod sensitivity;
pub mod transforms;
pub mod tuning;

pub use counts::{CountsDatabase, PublicCounts, UserContribution, Vocabulary};
pub use error::{Error, Result};
pub use eval::{AttackReport, EvalReport};
pub use mechanisms::{
    bayesian_dp, k_anonymize, laplace_baseline, modified_laplace_baseline, BayesianParams,
    MechanismKind, ReleasedDistribution,
};
pub use sensitivity::{SensitivityEstimate, SensitivityMethod};
pub use transforms::{LogVector, ProbDistribution, WeightVector};
pub use tuning::{end_to_end_dp, EndToEndParams, HyperGrid, PrivacyLedger, TuningOutcome};
