//! Deterministic seed fan-out.
//!
//! Every run takes a single root seed; all randomness (noise draws, data
//! splits, synthetic corpora, attack trials) flows from child seeds derived
//! here. Children are independent streams keyed by a purpose label and an
//! index, so concurrent work can be re-ordered without changing results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from `root` for the given purpose label and index.
///
/// The derivation is a SHA-256 hash, so distinct (label, index) pairs give
/// statistically independent streams and the mapping is stable across
/// platforms and releases.
pub fn child_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// A deterministic RNG seeded from a child seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
