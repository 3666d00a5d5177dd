//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Errors produced while building databases, transforming counts, or
/// running release mechanisms.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter was outside its valid range (bad epsilon, rho, grid, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Two vectors that must be aligned have different lengths.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// An operation that needs at least one element received none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A user id was not present in the database.
    #[error("unknown user id: {0:?}")]
    UnknownUser(String),

    /// A vocabulary file or entry violated the vocabulary invariants.
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    /// A counts / corpus file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// The worst-case sensitivity bound is undefined for words nobody holds.
    #[error("sensitivity bound undefined: word index {index} has zero support")]
    ZeroSupport { index: usize },

    /// KL divergence is infinite: q is zero where p has mass.
    #[error("KL divergence undefined: q[{index}] = 0 but p[{index}] > 0")]
    KlUndefined { index: usize },

    /// The perplexity corpus contains an n-gram the model cannot score.
    #[error("n-gram not covered by the model: {0:?}")]
    UncoveredNgram(String),

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
