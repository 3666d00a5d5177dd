//! Utility metrics, a membership-inference attack harness, and synthetic
//! data generators for experiments.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::counts::{CountsDatabase, PublicCounts, UserContribution, Vocabulary};
use crate::error::{Error, Result};
use crate::mechanisms::{sample_noise, MechanismKind, NoiseKind};
use crate::seed::{child_seed, rng_from_seed};
use crate::transforms::{kahan_sum, ProbDistribution};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// KL divergence `sum_i p_i ln(p_i / q_i)` with the usual zero-skip on
/// `p_i = 0`. Fails where `p` puts mass on a point `q` does not.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), actual: q.len() });
    }
    if p.iter().chain(q).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("kl divergence inputs"));
    }
    let mut terms = Vec::with_capacity(p.len());
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::KlUndefined { index: i });
        }
        terms.push(pi * (pi / qi).ln());
    }
    Ok(kahan_sum(terms))
}

/// Per-position conditional likelihood of held-out sentences under a
/// distribution over the n-grams of `vocab`, reported as a perplexity.
///
/// For each window of `order` tokens the model probability is the n-gram's
/// mass divided by the total mass of n-grams sharing its `order - 1`-token
/// context. Any window missing from the vocabulary (or carried with zero
/// mass) is an error; filter sentences first if that is not intended.
pub fn conditional_perplexity(
    theta: &[f64],
    vocab: &Vocabulary,
    sentences: &[String],
) -> Result<f64> {
    if theta.len() != vocab.len() {
        return Err(Error::DimensionMismatch { expected: vocab.len(), actual: theta.len() });
    }
    if theta.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("model distribution"));
    }
    let context_of = |entry: &str| -> String {
        entry.rsplit_once(' ').map(|(ctx, _)| ctx.to_string()).unwrap_or_default()
    };
    let mut context_mass: HashMap<String, f64> = HashMap::new();
    for (idx, entry) in vocab.entries().iter().enumerate() {
        *context_mass.entry(context_of(entry)).or_insert(0.0) += theta[idx];
    }
    let order = vocab.order();
    let mut log_likelihoods = Vec::new();
    for sentence in sentences {
        let tokens: Vec<String> =
            sentence.to_lowercase().split_whitespace().map(str::to_string).collect();
        if tokens.len() < order {
            continue;
        }
        for window in tokens.windows(order) {
            let ngram = window.join(" ");
            let idx = vocab
                .index_of(&ngram)
                .ok_or_else(|| Error::UncoveredNgram(ngram.clone()))?;
            let denom = context_mass[&context_of(&ngram)];
            if theta[idx] <= 0.0 || denom <= 0.0 {
                return Err(Error::UncoveredNgram(ngram));
            }
            log_likelihoods.push((theta[idx] / denom).ln());
        }
    }
    if log_likelihoods.is_empty() {
        return Err(Error::EmptyInput("evaluation positions"));
    }
    let mean = kahan_sum(log_likelihoods.iter().copied()) / log_likelihoods.len() as f64;
    Ok((-mean).exp())
}

/// Keeps only sentences whose every window is in the vocabulary (and, if a
/// reference distribution is given, carries positive mass there) and that
/// contain at least one window.
pub fn filter_covered(
    vocab: &Vocabulary,
    sentences: &[String],
    reference: Option<&[f64]>,
) -> Vec<String> {
    let order = vocab.order();
    sentences
        .iter()
        .filter(|sentence| {
            let tokens: Vec<String> =
                sentence.to_lowercase().split_whitespace().map(str::to_string).collect();
            if tokens.len() < order {
                return false;
            }
            tokens.windows(order).all(|window| {
                let ngram = window.join(" ");
                match vocab.index_of(&ngram) {
                    Some(idx) => reference.map_or(true, |r| r[idx] > 0.0),
                    None => false,
                }
            })
        })
        .cloned()
        .collect()
}

/// Utility metrics of one release, as written by the evaluation tools.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mechanism: MechanismKind,
    pub epsilon_spent: f64,
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_from_private: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditional_perplexity: Option<f64>,
}

// ---------------------------------------------------------------------------
// Membership inference
// ---------------------------------------------------------------------------

/// Attack success rate at one privacy level.
#[derive(Debug, Clone, Serialize)]
pub struct AttackPoint {
    pub epsilon: f64,
    pub success_rate: f64,
}

/// Result of the membership-inference experiment for one mechanism.
#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub mechanism: String,
    pub target_user: String,
    pub trials: u64,
    pub points: Vec<AttackPoint>,
}

/// Picks the user with the largest total contribution (ties resolved toward
/// the smallest id; users are stored id-sorted).
fn attack_target(db: &CountsDatabase) -> Result<&UserContribution> {
    let mut best: Option<&UserContribution> = None;
    for user in db.users() {
        if best.map_or(true, |b| user.total() > b.total()) {
            best = Some(user);
        }
    }
    let target = best.ok_or(Error::EmptyInput("attack database"))?;
    if target.total() == 0 {
        return Err(Error::EmptyInput("attack target counts"));
    }
    Ok(target)
}

/// Membership inference against the heaviest contributor: per trial the
/// mechanism runs once with and once without the target (independent noise),
/// and the attack succeeds when the target's own distribution is closer (in
/// KL) to the release that included them. Reports the success rate per
/// epsilon.
pub fn membership_inference<M>(
    db: &CountsDatabase,
    epsilons: &[f64],
    trials: u64,
    mechanism: M,
    label: &str,
    seed: u64,
) -> Result<AttackReport>
where
    M: Fn(&CountsDatabase, f64, u64) -> Result<ProbDistribution> + Sync,
{
    if epsilons.is_empty() {
        return Err(Error::EmptyInput("attack epsilon list"));
    }
    if trials == 0 {
        return Err(Error::EmptyInput("attack trials"));
    }
    let target = attack_target(db)?;
    let target_total = target.total() as f64;
    let target_pmf: Vec<f64> = {
        let mut dense = vec![0.0; db.vocab_size()];
        for (idx, cnt) in target.counts() {
            dense[idx] = cnt as f64 / target_total;
        }
        dense
    };
    let without = db.without_user(target.user_id())?;
    let mut points = Vec::with_capacity(epsilons.len());
    for (ei, &epsilon) in epsilons.iter().enumerate() {
        let successes: u64 = (0..trials)
            .into_par_iter()
            .map(|t| -> Result<u64> {
                let tag = ei as u64 * trials + t;
                let with_theta =
                    mechanism(db, epsilon, child_seed(seed, "attack-target-present", tag))?;
                let without_theta =
                    mechanism(&without, epsilon, child_seed(seed, "attack-target-absent", tag))?;
                let kl_with = kl_divergence(&target_pmf, with_theta.values())?;
                let kl_without = kl_divergence(&target_pmf, without_theta.values())?;
                Ok(u64::from(kl_with < kl_without))
            })
            .sum::<Result<u64>>()?;
        points.push(AttackPoint { epsilon, success_rate: successes as f64 / trials as f64 });
    }
    Ok(AttackReport {
        mechanism: label.to_string(),
        target_user: target.user_id().to_string(),
        trials,
        points,
    })
}

/// Degrades public counts by adding Laplace noise and clipping at zero,
/// simulating an increasingly unrelated public source.
pub fn degrade_public(alpha: &PublicCounts, scale: f64, seed: u64) -> Result<PublicCounts> {
    let noise = sample_noise(
        NoiseKind::Laplace,
        scale,
        alpha.len(),
        child_seed(seed, "public-degrade", 0),
    )?;
    PublicCounts::new(
        alpha
            .values()
            .iter()
            .zip(&noise)
            .map(|(a, e)| (a + e).max(0.0))
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

fn zipf_pmf(n: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| ((i + 1) as f64).powf(-exponent)).collect();
    let total = kahan_sum(raw.iter().copied());
    raw.into_iter().map(|v| v / total).collect()
}

fn cumulative(pmf: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    pmf.iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

fn sample_index(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Synthetic single-word corpus: every user draws `tokens_per_user` tokens
/// from a Zipf distribution, and the public counts follow the same
/// distribution with its tail probabilities shuffled (the head, the most
/// frequent tenth of the vocabulary, is kept aligned). The public counts are
/// the expected counts under that perturbed distribution, not a sample.
pub fn synthetic_corpus(
    vocab_size: usize,
    num_users: usize,
    tokens_per_user: u64,
    zipf_exponent: f64,
    seed: u64,
) -> Result<(Arc<Vocabulary>, CountsDatabase, PublicCounts)> {
    if vocab_size == 0 {
        return Err(Error::EmptyInput("synthetic vocabulary"));
    }
    if !zipf_exponent.is_finite() || zipf_exponent < 0.0 {
        return Err(Error::Config(format!(
            "zipf exponent {zipf_exponent} must be finite and non-negative"
        )));
    }
    let entries: Vec<String> = (0..vocab_size).map(|i| format!("w{i:06}")).collect();
    let vocab = Arc::new(Vocabulary::new(1, entries)?);
    let pmf = zipf_pmf(vocab_size, zipf_exponent);
    let cdf = cumulative(&pmf);
    let users: Vec<UserContribution> = (0..num_users)
        .map(|u| {
            let mut rng = rng_from_seed(child_seed(seed, "private-tokens", u as u64));
            let mut dense = vec![0u64; vocab_size];
            for _ in 0..tokens_per_user {
                dense[sample_index(&cdf, &mut rng)] += 1;
            }
            UserContribution::from_dense(format!("u{u:06}"), &dense)
        })
        .collect();
    let db = CountsDatabase::new(Arc::clone(&vocab), users)?;

    let head = (vocab_size / 10).max(1);
    let mut public_pmf = pmf;
    if head < vocab_size {
        let mut rng = rng_from_seed(child_seed(seed, "public-shuffle", 0));
        // Fisher-Yates over the tail only.
        for i in (head + 1..vocab_size).rev() {
            let j = rng.gen_range(head..=i);
            public_pmf.swap(i, j);
        }
    }
    let mass = num_users as f64 * tokens_per_user as f64;
    let alpha = PublicCounts::new(public_pmf.into_iter().map(|p| p * mass).collect())?;
    Ok((vocab, db, alpha))
}

/// Synthetic sentences of i.i.d. Zipf-distributed tokens (`t0000`-style),
/// suitable for building higher-order n-gram vocabularies and held-out sets.
pub fn synthetic_sentences(
    token_count: usize,
    num_sentences: usize,
    sentence_len: usize,
    zipf_exponent: f64,
    seed: u64,
) -> Vec<String> {
    let tokens: Vec<String> = (0..token_count).map(|i| format!("t{i:04}")).collect();
    let cdf = cumulative(&zipf_pmf(token_count, zipf_exponent));
    let mut rng = rng_from_seed(child_seed(seed, "sentences", 0));
    (0..num_sentences)
        .map(|_| {
            (0..sentence_len)
                .map(|_| tokens[sample_index(&cdf, &mut rng)].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}
