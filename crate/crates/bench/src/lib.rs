//! Shared fixtures for the criterion benches.

use std::sync::Arc;

use ngram_dp_core::eval::synthetic_corpus;
use ngram_dp_core::{CountsDatabase, PublicCounts, Vocabulary};

/// Zipf-distributed user database plus a matching public prior.
pub fn bench_corpus(
    vocab_size: usize,
    num_users: usize,
) -> (Arc<Vocabulary>, CountsDatabase, PublicCounts) {
    synthetic_corpus(vocab_size, num_users, 50, 1.1, 0xBE7C).expect("bench corpus")
}
