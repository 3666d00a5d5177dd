//! Vocabularies, per-user n-gram counts, and aggregate count databases.
//!
//! A [`CountsDatabase`] keeps one sparse count vector per user plus the dense
//! aggregates derived from them: total counts `c` and supports `N` (how many
//! users hold each n-gram). Adjacency for the privacy analysis is defined at
//! the user level, so removal of a whole user is a first-class operation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// An ordered set of distinct n-grams; the position of an entry is its index
/// in every dense vector used by the rest of the crate.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    order: usize,
    entries: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from distinct n-gram strings (tokens joined by
    /// single spaces). Every entry must have exactly `order` tokens.
    pub fn new(order: usize, entries: Vec<String>) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if entries.is_empty() {
            return Err(Error::EmptyInput("vocabulary"));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, entry) in entries.iter().enumerate() {
            let tokens = entry.split_whitespace().count();
            if tokens != order {
                return Err(Error::Vocabulary(format!(
                    "entry {entry:?} has {tokens} tokens, expected {order}"
                )));
            }
            if index.insert(entry.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate entry {entry:?}")));
            }
        }
        Ok(Self { order, entries, index })
    }

    /// Builds a vocabulary from every n-gram observed in a corpus, ordered by
    /// descending count and then lexicographically (deterministic).
    pub fn from_corpus(order: usize, text: &str) -> Result<Self> {
        let counts = extract_ngrams(text, order);
        if counts.is_empty() {
            return Err(Error::EmptyInput("corpus yielded no n-grams"));
        }
        let mut pairs: Vec<(String, u64)> = counts.into_iter().collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::new(order, pairs.into_iter().map(|(g, _)| g).collect())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, idx: usize) -> &str {
        &self.entries[idx]
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn index_of(&self, ngram: &str) -> Option<usize> {
        self.index.get(ngram).copied()
    }

    /// Reads a vocabulary file: one n-gram per line, line order defines the
    /// index. The order is inferred from the first line.
    pub fn read_from(reader: impl Read) -> Result<Self> {
        let mut entries = Vec::new();
        for line in BufReader::new(reader).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(line.trim().to_string());
        }
        let first = entries
            .first()
            .ok_or(Error::EmptyInput("vocabulary file"))?;
        let order = first.split_whitespace().count();
        Self::new(order, entries)
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    /// Writes the vocabulary in the one-n-gram-per-line format.
    pub fn write_to(&self, mut writer: impl Write) -> Result<()> {
        for entry in &self.entries {
            writeln!(writer, "{entry}")?;
        }
        Ok(())
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }
}

/// Extracts the multiset of n-grams from raw text.
///
/// Text is lowercased and split on whitespace; each line is one sentence and
/// windows never cross sentence boundaries.
pub fn extract_ngrams(text: &str, order: usize) -> BTreeMap<String, u64> {
    assert!(order >= 1, "n-gram order must be at least 1");
    let mut counts = BTreeMap::new();
    for sentence in text.lines() {
        let tokens: Vec<String> = sentence
            .split_whitespace()
            .map(|t| t.to_lowercase())
            .collect();
        if tokens.len() < order {
            continue;
        }
        for window in tokens.windows(order) {
            *counts.entry(window.join(" ")).or_insert(0) += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Per-user counts
// ---------------------------------------------------------------------------

/// One user's sparse n-gram counts (word index -> count, zero entries absent).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserContribution {
    user_id: String,
    counts: BTreeMap<usize, u64>,
}

impl UserContribution {
    pub fn new(user_id: impl Into<String>, counts: impl IntoIterator<Item = (usize, u64)>) -> Self {
        let mut map = BTreeMap::new();
        for (idx, count) in counts {
            if count > 0 {
                *map.entry(idx).or_insert(0) += count;
            }
        }
        Self { user_id: user_id.into(), counts: map }
    }

    pub fn from_dense(user_id: impl Into<String>, counts: &[u64]) -> Self {
        Self::new(user_id, counts.iter().copied().enumerate().filter(|&(_, c)| c > 0))
    }

    /// Counts the n-grams of `text` against a vocabulary; out-of-vocabulary
    /// n-grams are dropped.
    pub fn from_text(user_id: impl Into<String>, text: &str, vocab: &Vocabulary) -> Self {
        let grams = extract_ngrams(text, vocab.order());
        Self::new(
            user_id,
            grams
                .into_iter()
                .filter_map(|(g, c)| vocab.index_of(&g).map(|i| (i, c))),
        )
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    /// Sparse iterator over (word index, count), ascending by index.
    pub fn counts(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.counts.iter().map(|(&i, &c)| (i, c))
    }

    pub fn count(&self, idx: usize) -> u64 {
        self.counts.get(&idx).copied().unwrap_or(0)
    }

    /// Total number of counts this user contributes.
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Number of distinct n-grams with a positive count.
    pub fn support_size(&self) -> usize {
        self.counts.len()
    }

    pub fn to_dense(&self, vocab_size: usize) -> Vec<u64> {
        let mut dense = vec![0; vocab_size];
        for (&i, &c) in &self.counts {
            dense[i] = c;
        }
        dense
    }

    /// Applies the two contribution limits: each count is clamped to `word_cap`,
    /// then whole n-grams are dropped — smallest clamped count first, ties by
    /// ascending word index — until the user's total is at most `total_cap`.
    pub fn apply_contribution_limits(&self, word_cap: u64, total_cap: u64) -> UserContribution {
        assert!(word_cap >= 1, "per-word cap must be at least 1");
        assert!(total_cap >= 1, "per-user total cap must be at least 1");
        let mut clamped: Vec<(usize, u64)> = self
            .counts
            .iter()
            .map(|(&i, &c)| (i, c.min(word_cap)))
            .collect();
        let mut total: u64 = clamped.iter().map(|&(_, c)| c).sum();
        if total > total_cap {
            // Drop order: ascending (count, index); survivors keep full counts.
            let mut order: Vec<usize> = (0..clamped.len()).collect();
            order.sort_by_key(|&k| (clamped[k].1, clamped[k].0));
            for &k in &order {
                if total <= total_cap {
                    break;
                }
                total -= clamped[k].1;
                clamped[k].1 = 0;
            }
        }
        UserContribution::new(self.user_id.clone(), clamped)
    }
}

// ---------------------------------------------------------------------------
// Database
// ---------------------------------------------------------------------------

/// Sums per-user counts into dense totals `c` and supports `N`.
pub fn aggregate(vocab_size: usize, users: &[UserContribution]) -> (Vec<u64>, Vec<u64>) {
    let mut totals = vec![0u64; vocab_size];
    let mut supports = vec![0u64; vocab_size];
    for user in users {
        for (idx, count) in user.counts() {
            totals[idx] += count;
            supports[idx] += 1;
        }
    }
    (totals, supports)
}

/// A collection of per-user counts over a shared vocabulary, with the dense
/// aggregates kept alongside.
#[derive(Debug, Clone)]
pub struct CountsDatabase {
    vocabulary: Arc<Vocabulary>,
    users: Vec<UserContribution>,
    totals: Vec<u64>,
    supports: Vec<u64>,
}

impl CountsDatabase {
    pub fn new(vocabulary: Arc<Vocabulary>, users: Vec<UserContribution>) -> Result<Self> {
        let vocab_size = vocabulary.len();
        let mut seen = HashMap::with_capacity(users.len());
        for (pos, user) in users.iter().enumerate() {
            if let Some(prev) = seen.insert(user.user_id().to_string(), pos) {
                return Err(Error::Config(format!(
                    "duplicate user id {:?} (positions {prev} and {pos})",
                    user.user_id()
                )));
            }
            if let Some((idx, _)) = user.counts().last() {
                if idx >= vocab_size {
                    return Err(Error::DimensionMismatch { expected: vocab_size, actual: idx + 1 });
                }
            }
        }
        let (totals, supports) = aggregate(vocab_size, &users);
        Ok(Self { vocabulary, users, totals, supports })
    }

    pub fn vocabulary(&self) -> &Arc<Vocabulary> {
        &self.vocabulary
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn users(&self) -> &[UserContribution] {
        &self.users
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Aggregated counts `c`.
    pub fn totals(&self) -> &[u64] {
        &self.totals
    }

    /// Supports `N`: the number of users holding each n-gram.
    pub fn supports(&self) -> &[u64] {
        &self.supports
    }

    pub fn user(&self, user_id: &str) -> Option<&UserContribution> {
        self.users.iter().find(|u| u.user_id() == user_id)
    }

    /// The database with one user removed (the adjacent database of the
    /// privacy analysis). Aggregates are updated incrementally.
    pub fn without_user(&self, user_id: &str) -> Result<CountsDatabase> {
        let pos = self
            .users
            .iter()
            .position(|u| u.user_id() == user_id)
            .ok_or_else(|| Error::UnknownUser(user_id.to_string()))?;
        let mut users = self.users.clone();
        let removed = users.remove(pos);
        let mut totals = self.totals.clone();
        let mut supports = self.supports.clone();
        for (idx, count) in removed.counts() {
            totals[idx] -= count;
            supports[idx] -= 1;
        }
        Ok(Self {
            vocabulary: Arc::clone(&self.vocabulary),
            users,
            totals,
            supports,
        })
    }

    /// Applies [`UserContribution::apply_contribution_limits`] to every user
    /// and rebuilds the aggregates.
    pub fn apply_contribution_limits(&self, word_cap: u64, total_cap: u64) -> CountsDatabase {
        let users: Vec<UserContribution> = self
            .users
            .iter()
            .map(|u| u.apply_contribution_limits(word_cap, total_cap))
            .collect();
        let (totals, supports) = aggregate(self.vocab_size(), &users);
        Self {
            vocabulary: Arc::clone(&self.vocabulary),
            users,
            totals,
            supports,
        }
    }

    /// Deterministic user-level split: a seeded shuffle, then the first
    /// `ceil(fraction * num_users)` users form the first returned database.
    pub fn split_users(&self, fraction: f64, seed: u64) -> Result<(CountsDatabase, CountsDatabase)> {
        if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
            return Err(Error::Config(format!("split fraction {fraction} outside [0, 1]")));
        }
        let mut order: Vec<usize> = (0..self.users.len()).collect();
        order.shuffle(&mut rng_from_seed(seed));
        let take = (fraction * self.users.len() as f64).ceil() as usize;
        let (first, second) = order.split_at(take.min(order.len()));
        let pick = |idxs: &[usize]| -> Result<CountsDatabase> {
            CountsDatabase::new(
                Arc::clone(&self.vocabulary),
                idxs.iter().map(|&i| self.users[i].clone()).collect(),
            )
        };
        Ok((pick(first)?, pick(second)?))
    }

    /// Reads the tab-separated counts format: `user_id<TAB>ngram<TAB>count`.
    /// Lines repeat per (user, n-gram) pair and accumulate; out-of-vocabulary
    /// n-grams are dropped. Users are ordered by id.
    pub fn read_tsv(reader: impl Read, vocabulary: Arc<Vocabulary>) -> Result<Self> {
        let mut per_user: BTreeMap<String, BTreeMap<usize, u64>> = BTreeMap::new();
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let (user, ngram, count) = match (fields.next(), fields.next(), fields.next()) {
                (Some(u), Some(g), Some(c)) => (u, g, c),
                _ => {
                    return Err(Error::Parse(format!(
                        "line {}: expected user<TAB>ngram<TAB>count",
                        lineno + 1
                    )))
                }
            };
            let count: u64 = count.trim().parse().map_err(|_| {
                Error::Parse(format!("line {}: invalid count {count:?}", lineno + 1))
            })?;
            if let Some(idx) = vocabulary.index_of(ngram.trim()) {
                *per_user
                    .entry(user.to_string())
                    .or_default()
                    .entry(idx)
                    .or_insert(0) += count;
            }
        }
        let users = per_user
            .into_iter()
            .map(|(id, counts)| UserContribution::new(id, counts))
            .collect();
        Self::new(vocabulary, users)
    }

    pub fn read_tsv_path(path: impl AsRef<Path>, vocabulary: Arc<Vocabulary>) -> Result<Self> {
        Self::read_tsv(std::fs::File::open(path)?, vocabulary)
    }

    /// Writes the tab-separated counts format.
    pub fn write_tsv(&self, mut writer: impl Write) -> Result<()> {
        let mut buf = String::new();
        for user in &self.users {
            for (idx, count) in user.counts() {
                buf.clear();
                let _ = write!(
                    buf,
                    "{}\t{}\t{}",
                    user.user_id(),
                    self.vocabulary.entry(idx),
                    count
                );
                writeln!(writer, "{buf}")?;
            }
        }
        Ok(())
    }

    pub fn write_tsv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_tsv(std::fs::File::create(path)?)
    }
}

// ---------------------------------------------------------------------------
// Public counts
// ---------------------------------------------------------------------------

/// Dense non-negative pseudo-counts from a public corpus (the prior's data).
#[derive(Debug, Clone, PartialEq)]
pub struct PublicCounts {
    alpha: Vec<f64>,
}

impl PublicCounts {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::EmptyInput("public counts"));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::NonFinite("public counts"));
        }
        Ok(Self { alpha })
    }

    /// Counts a public text corpus against a vocabulary (OOV dropped).
    pub fn from_corpus(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut alpha = vec![0.0; vocab.len()];
        for (gram, count) in extract_ngrams(text, vocab.order()) {
            if let Some(idx) = vocab.index_of(&gram) {
                alpha[idx] += count as f64;
            }
        }
        Self::new(alpha)
    }

    /// Reads the counts TSV format, summing the count column per n-gram over
    /// all rows (the user column is ignored for public data).
    pub fn read_tsv(reader: impl Read, vocab: &Vocabulary) -> Result<Self> {
        let db = CountsDatabase::read_tsv(reader, Arc::new(vocab.clone()))?;
        Self::new(db.totals().iter().map(|&c| c as f64).collect())
    }

    pub fn read_tsv_path(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        Self::read_tsv(std::fs::File::open(path)?, vocab)
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.alpha.iter().sum()
    }
}
