//! User-level l2 sensitivity of the weighted log transform.
//!
//! The Gaussian mechanism is calibrated to
//! `gamma = max_n || w .* x(c) - w_-n .* x(c - dc_n) ||_2`,
//! the largest change any single user's removal can make to the weighted
//! log-normalized counts. `brute_force_sensitivity` evaluates this exactly
//! with per-user work proportional to the user's support (not the vocabulary
//! size); `worst_case_bound` gives a data-independent upper bound built from
//! Lipschitz coefficients of the log transform.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counts::CountsDatabase;
use crate::error::{Error, Result};
use crate::transforms::kahan_sum;

/// How the calibration sensitivity was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivityMethod {
    /// Exact maximum over users of the removal difference.
    BruteForce,
    /// Closed-form upper bound from Lipschitz coefficients.
    WorstCaseBound,
}

impl std::fmt::Display for SensitivityMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SensitivityMethod::BruteForce => write!(f, "brute-force"),
            SensitivityMethod::WorstCaseBound => write!(f, "worst-case-bound"),
        }
    }
}

/// A sensitivity value plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityEstimate {
    pub gamma: f64,
    pub method: SensitivityMethod,
    /// The user attaining the maximum (brute force only; ties resolve to the
    /// earliest user in database order).
    pub argmax_user: Option<String>,
}

/// Per-word Lipschitz coefficients of the centered log transform.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzCoeffs(Vec<f64>);

impl LipschitzCoeffs {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn validate_weight_params(s: f64, word_cap: f64) -> Result<()> {
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::Config(format!("weighting parameter S = {s} must be positive")));
    }
    if !word_cap.is_finite() || word_cap < 1.0 {
        return Err(Error::Config(format!("per-word cap C = {word_cap} must be at least 1")));
    }
    Ok(())
}

/// Exact user-removal sensitivity of the weighted log transform.
///
/// The database must already be clamped so every count is at most `word_cap`.
/// Each user costs O(support) work: only a user's own coordinates change
/// individually, while every other coordinate shifts by the common mean
/// difference, whose contribution is folded in via precomputed weight sums.
pub fn brute_force_sensitivity(
    db: &CountsDatabase,
    s: f64,
    word_cap: f64,
) -> Result<SensitivityEstimate> {
    validate_weight_params(s, word_cap)?;
    if db.num_users() == 0 {
        return Ok(SensitivityEstimate {
            gamma: 0.0,
            method: SensitivityMethod::BruteForce,
            argmax_user: None,
        });
    }
    let vocab_size = db.vocab_size() as f64;
    let totals = db.totals();
    let supports = db.supports();
    let logs: Vec<f64> = totals.iter().map(|&c| ((c + 1) as f64).ln()).collect();
    let log_sum = kahan_sum(logs.iter().copied());
    let mean = log_sum / vocab_size;
    let weights: Vec<f64> = supports
        .iter()
        .map(|&n| (s * n as f64 / word_cap).min(1.0))
        .collect();
    let weight_sq_sum = kahan_sum(weights.iter().map(|&w| w * w));

    let per_user: Vec<f64> = db
        .users()
        .par_iter()
        .map(|user| {
            // Log counts after removing this user, on the user's support only.
            let removed: Vec<(usize, f64)> = user
                .counts()
                .map(|(idx, cnt)| (idx, ((totals[idx] - cnt + 1) as f64).ln()))
                .collect();
            let delta_log_sum =
                kahan_sum(removed.iter().map(|&(idx, lr)| logs[idx] - lr));
            let mean_removed = (log_sum - delta_log_sum) / vocab_size;
            let mean_shift = mean_removed - mean;
            // Coordinates in the user's support change individually ...
            let mut sq = 0.0;
            let mut support_weight_sq = 0.0;
            for &(idx, lr) in &removed {
                let w = weights[idx];
                let w_removed = (s * (supports[idx] - 1) as f64 / word_cap).min(1.0);
                let d = w * (logs[idx] - mean) - w_removed * (lr - mean_removed);
                sq += d * d;
                support_weight_sq += w * w;
            }
            // ... every other coordinate only sees the mean shift.
            let rest = (weight_sq_sum - support_weight_sq).max(0.0);
            (sq + mean_shift * mean_shift * rest).max(0.0).sqrt()
        })
        .collect();

    let (best_idx, gamma) = per_user
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bg), (i, g)| {
            if g > bg {
                (i, g)
            } else {
                (bi, bg)
            }
        });
    Ok(SensitivityEstimate {
        gamma,
        method: SensitivityMethod::BruteForce,
        argmax_user: Some(db.users()[best_idx].user_id().to_string()),
    })
}

/// Lipschitz coefficients
/// `L_i = (1 - 1/V) / N_i + sum_{j != i} 1 / (V * N_j)`
/// of the centered log transform with respect to the max-norm of the counts.
///
/// `supports` may be a restriction to the words actually held by someone;
/// `vocab_size` is always the full vocabulary size (it enters through the
/// mean term). Words with zero support are refused: the bound is undefined
/// for them and callers must drop them from the restriction.
pub fn lipschitz_coeffs(supports: &[u64], vocab_size: usize) -> Result<LipschitzCoeffs> {
    if supports.is_empty() {
        return Err(Error::EmptyInput("lipschitz supports"));
    }
    if vocab_size < supports.len() {
        return Err(Error::Config(format!(
            "vocabulary size {vocab_size} smaller than {} supplied supports",
            supports.len()
        )));
    }
    if let Some(idx) = supports.iter().position(|&n| n == 0) {
        return Err(Error::ZeroSupport { index: idx });
    }
    let v = vocab_size as f64;
    let inv_sum = kahan_sum(supports.iter().map(|&n| 1.0 / (v * n as f64)));
    let coeffs = supports
        .iter()
        .map(|&n| {
            let nf = n as f64;
            (1.0 - 1.0 / v) / nf + (inv_sum - 1.0 / (v * nf))
        })
        .collect();
    Ok(LipschitzCoeffs(coeffs))
}

/// Data-independent upper bound on the user-removal sensitivity:
/// `|| w .* L * C + (S/C) * |x| .* [N <= C/S] ||_2`.
///
/// `xhat` and `supports` are restricted to words with positive support, in
/// the same index order; `vocab_size` is the full vocabulary size.
pub fn worst_case_bound(
    xhat: &[f64],
    supports: &[u64],
    s: f64,
    word_cap: f64,
    vocab_size: usize,
) -> Result<SensitivityEstimate> {
    validate_weight_params(s, word_cap)?;
    if xhat.len() != supports.len() {
        return Err(Error::DimensionMismatch { expected: supports.len(), actual: xhat.len() });
    }
    let lipschitz = lipschitz_coeffs(supports, vocab_size)?;
    let unsaturated = word_cap / s;
    let sq_sum = kahan_sum(
        supports
            .iter()
            .zip(xhat)
            .zip(lipschitz.values())
            .map(|((&n, &x), &l)| {
                let w = (s * n as f64 / word_cap).min(1.0);
                let mut term = w * l * word_cap;
                if n as f64 <= unsaturated {
                    term += (s / word_cap) * x.abs();
                }
                term * term
            }),
    );
    Ok(SensitivityEstimate {
        gamma: sq_sum.max(0.0).sqrt(),
        method: SensitivityMethod::WorstCaseBound,
        argmax_user: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counts::{CountsDatabase, UserContribution, Vocabulary};
    use crate::transforms::log_normalize_counts;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn db_from_dense(rows: &[&[u64]]) -> CountsDatabase {
        let vocab_size = rows.first().map_or(1, |r| r.len());
        let entries: Vec<String> = (0..vocab_size).map(|i| format!("w{i}")).collect();
        let vocab = Arc::new(Vocabulary::new(1, entries).unwrap());
        let users = rows
            .iter()
            .enumerate()
            .map(|(i, r)| UserContribution::from_dense(format!("u{i}"), r))
            .collect();
        CountsDatabase::new(vocab, users).unwrap()
    }

    /// Naive oracle: materializes both full weighted vectors per user.
    fn oracle_gamma(db: &CountsDatabase, s: f64, cap: f64) -> f64 {
        let v = db.vocab_size();
        let f = |totals: &[u64], supports: &[u64]| -> Vec<f64> {
            let logs: Vec<f64> = totals.iter().map(|&c| ((c + 1) as f64).ln()).collect();
            let mean = logs.iter().sum::<f64>() / v as f64;
            logs.iter()
                .zip(supports)
                .map(|(&l, &n)| (l - mean) * (s * n as f64 / cap).min(1.0))
                .collect()
        };
        let base = f(db.totals(), db.supports());
        let mut best = 0.0f64;
        for user in db.users() {
            let mut totals = db.totals().to_vec();
            let mut supports = db.supports().to_vec();
            for (idx, cnt) in user.counts() {
                totals[idx] -= cnt;
                supports[idx] -= 1;
            }
            let removed = f(&totals, &supports);
            let norm = base
                .iter()
                .zip(&removed)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.max(norm);
        }
        best
    }

    #[test]
    fn single_user_hand_value() {
        // One user holding [3, 1] with S = 10, C = 10: removal zeroes both
        // the counts and the weights, so gamma = ||x||_2 = ln(2)/2 * sqrt(2).
        let db = db_from_dense(&[&[3, 1]]);
        let est = brute_force_sensitivity(&db, 10.0, 10.0).unwrap();
        assert_abs_diff_eq!(est.gamma, 0.490_129_071_734_273_6, epsilon = 1e-12);
        assert_eq!(est.argmax_user.as_deref(), Some("u0"));
    }

    #[test]
    fn empty_database_has_zero_sensitivity() {
        // db_from_dense with no rows builds a 1-word vocabulary and no users.
        let no_rows: [&[u64]; 0] = [];
        let db = db_from_dense(&no_rows);
        let est = brute_force_sensitivity(&db, 1.0, 1.0).unwrap();
        assert_eq!(est.gamma, 0.0);
        assert!(est.argmax_user.is_none());
    }

    #[test]
    fn all_zero_user_contributes_nothing() {
        let db = db_from_dense(&[&[2, 1], &[0, 0]]);
        let est = brute_force_sensitivity(&db, 1.0, 2.0).unwrap();
        let oracle = oracle_gamma(&db, 1.0, 2.0);
        assert_abs_diff_eq!(est.gamma, oracle, epsilon = 1e-12);
        assert_eq!(est.argmax_user.as_deref(), Some("u0"));
    }

    #[test]
    fn matches_oracle_on_small_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let num_users = rng.gen_range(1..8);
            let vocab_size = rng.gen_range(1..6);
            let rows: Vec<Vec<u64>> = (0..num_users)
                .map(|_| (0..vocab_size).map(|_| rng.gen_range(0..5)).collect())
                .collect();
            let refs: Vec<&[u64]> = rows.iter().map(|r| r.as_slice()).collect();
            let db = db_from_dense(&refs);
            let s = 10f64.powf(rng.gen_range(-2.0..2.0));
            let cap = rng.gen_range(1..6) as f64;
            let est = brute_force_sensitivity(&db, s, cap).unwrap();
            let oracle = oracle_gamma(&db, s, cap);
            assert_abs_diff_eq!(est.gamma, oracle, epsilon = 1e-10);
        }
    }

    // With saturated weights (here S/C = 10, so every held word has weight 1
    // even after one removal), one user's influence on the centered log
    // counts shrinks as the population grows, and so does gamma. Outside the
    // saturated regime this can fail: larger supports also grow the weights.
    #[test]
    fn replicating_users_shrinks_gamma_once_weights_saturate() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let replicate = |rows: &[Vec<u64>], copies: usize| -> CountsDatabase {
            let vocab_size = rows[0].len();
            let entries: Vec<String> = (0..vocab_size).map(|i| format!("w{i}")).collect();
            let vocab = Arc::new(Vocabulary::new(1, entries).unwrap());
            let users: Vec<UserContribution> = (0..copies)
                .flat_map(|c| {
                    rows.iter()
                        .enumerate()
                        .map(move |(i, r)| (c * rows.len() + i, r))
                })
                .map(|(id, r)| UserContribution::from_dense(format!("d{id:04}"), r))
                .collect();
            CountsDatabase::new(vocab, users).unwrap()
        };
        let mut checked = 0;
        while checked < 40 {
            let num_users = rng.gen_range(1..4);
            let vocab_size = rng.gen_range(2..6);
            let rows: Vec<Vec<u64>> = (0..num_users)
                .map(|_| (0..vocab_size).map(|_| rng.gen_range(0..4)).collect())
                .collect();
            // Two copies keep every held word held even after a removal.
            let base = replicate(&rows, 2);
            let gamma = brute_force_sensitivity(&base, 10.0, 1.0).unwrap().gamma;
            if gamma < 0.05 {
                continue; // too flat for the shrinkage to be measurable
            }
            let crowded = replicate(&rows, 100);
            let gamma_crowded = brute_force_sensitivity(&crowded, 10.0, 1.0).unwrap().gamma;
            assert!(
                gamma_crowded < 0.5 * gamma,
                "replication should shrink gamma: {gamma_crowded} vs {gamma}"
            );
            checked += 1;
        }
    }

    #[test]
    fn lipschitz_uniform_two_words() {
        let l = lipschitz_coeffs(&[1, 1], 2).unwrap();
        assert_abs_diff_eq!(l.values()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.values()[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lipschitz_mixed_supports() {
        let l = lipschitz_coeffs(&[1, 2], 2).unwrap();
        assert_abs_diff_eq!(l.values()[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(l.values()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn lipschitz_rejects_zero_support() {
        assert!(matches!(
            lipschitz_coeffs(&[1, 0, 2], 3),
            Err(Error::ZeroSupport { index: 1 })
        ));
    }

    #[test]
    fn worst_case_bound_hand_value() {
        // |V| = 2, N = [1, 1], S = 10, C = 1: weights saturate, the
        // indicator is off (N > C/S), so the bound is ||L * C||_2 = sqrt(2).
        let db = db_from_dense(&[&[3, 1]]);
        let clamped = db.apply_contribution_limits(1, u64::MAX);
        let xhat = log_normalize_counts(clamped.totals()).unwrap();
        let est = worst_case_bound(xhat.values(), clamped.supports(), 10.0, 1.0, 2).unwrap();
        assert_abs_diff_eq!(est.gamma, 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn bound_dominates_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..60 {
            let num_users = rng.gen_range(1..8);
            let vocab_size = rng.gen_range(1..6);
            // Full support: every word held by at least the first user.
            let rows: Vec<Vec<u64>> = (0..num_users)
                .map(|u| {
                    (0..vocab_size)
                        .map(|_| if u == 0 { rng.gen_range(1..5) } else { rng.gen_range(0..5) })
                        .collect()
                })
                .collect();
            let refs: Vec<&[u64]> = rows.iter().map(|r| r.as_slice()).collect();
            let db = db_from_dense(&refs);
            let s = 10f64.powf(rng.gen_range(-2.0..2.0));
            let cap = rng.gen_range(1..6);
            let clamped = db.apply_contribution_limits(cap, u64::MAX);
            let brute = brute_force_sensitivity(&clamped, s, cap as f64).unwrap();
            let xhat = log_normalize_counts(clamped.totals()).unwrap();
            let bound = worst_case_bound(
                xhat.values(),
                clamped.supports(),
                s,
                cap as f64,
                vocab_size,
            )
            .unwrap();
            assert!(
                bound.gamma >= brute.gamma - 1e-12,
                "bound {} below brute force {}",
                bound.gamma,
                brute.gamma
            );
        }
    }

    #[test]
    fn parameters_are_validated() {
        let db = db_from_dense(&[&[1]]);
        assert!(brute_force_sensitivity(&db, 0.0, 1.0).is_err());
        assert!(brute_force_sensitivity(&db, 1.0, 0.0).is_err());
        assert!(worst_case_bound(&[0.0], &[1], -1.0, 1.0, 1).is_err());
        assert!(worst_case_bound(&[0.0, 0.0], &[1], 1.0, 1.0, 2).is_err());
        assert!(lipschitz_coeffs(&[], 4).is_err());
        assert!(lipschitz_coeffs(&[1, 1], 1).is_err());
    }
}
