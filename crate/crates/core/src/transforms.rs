//! Log-space transforms shared by the release mechanisms.
//!
//! Counts are lifted to log space with an add-one, mean-centered transform;
//! the public prior is the same transform applied to public pseudo-counts.
//! A released histogram is recovered from a (noised) log-space vector with a
//! max-shifted softmax, so the pipeline never exponentiates raw counts.

use serde::{Deserialize, Serialize};

use crate::counts::PublicCounts;
use crate::error::{Error, Result};

/// Compensated (Kahan) summation; keeps long reductions accurate enough for
/// the 1e-12 validity tolerance on released distributions.
pub(crate) fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

// ---------------------------------------------------------------------------
// Vector types
// ---------------------------------------------------------------------------

/// A finite vector living in centered log space.
#[derive(Debug, Clone, PartialEq)]
pub struct LogVector(Vec<f64>);

impl LogVector {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("log vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log vector"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Per-word decay weights `w_i = min(1, S * N_i / C)` with the parameters
/// they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    values: Vec<f64>,
    s: f64,
    word_cap: f64,
}

impl WeightVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn word_cap(&self) -> f64 {
        self.word_cap
    }
}

/// A released probability distribution: strictly positive entries summing to
/// one within 1e-12 relative error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbDistribution(Vec<f64>);

impl ProbDistribution {
    const SUM_TOLERANCE: f64 = 1e-12;

    /// Validates an already-normalized vector.
    pub fn from_normalized(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("probability distribution"));
        }
        if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::NonFinite("probability distribution entries"));
        }
        let sum = kahan_sum(values.iter().copied());
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::NonFinite("probability distribution sum"));
        }
        Ok(Self(values))
    }

    /// Normalizes a non-negative vector. An all-zero vector becomes uniform;
    /// zero entries are floored at the smallest positive normal f64 so the
    /// result is strictly positive (the floor is far below every tolerance
    /// used anywhere in this crate).
    pub fn from_nonnegative(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("probability distribution"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("unnormalized distribution entries"));
        }
        let sum = kahan_sum(values.iter().copied());
        if sum <= 0.0 {
            return Ok(Self::uniform(values.len()));
        }
        let mut normalized: Vec<f64> = values.iter().map(|v| v / sum).collect();
        // Second pass tightens the sum to within a few ulps of 1.
        let sum2 = kahan_sum(normalized.iter().copied());
        for v in &mut normalized {
            *v = (*v / sum2).max(f64::MIN_POSITIVE);
        }
        Self::from_normalized(normalized)
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len >= 1, "uniform distribution needs at least one entry");
        Self(vec![1.0 / len as f64; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbDistribution {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::from_normalized(values)
    }
}

impl From<ProbDistribution> for Vec<f64> {
    fn from(dist: ProbDistribution) -> Vec<f64> {
        dist.0
    }
}

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

/// Centered add-one log transform:
/// `x_i = log(v_i + 1) - mean_j log(v_j + 1)`.
///
/// Accepts real-valued inputs so the same transform serves private counts and
/// public pseudo-counts.
pub fn log_normalize(values: &[f64]) -> Result<LogVector> {
    if values.is_empty() {
        return Err(Error::EmptyInput("log_normalize input"));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("log_normalize input"));
    }
    let logs: Vec<f64> = values.iter().map(|v| (v + 1.0).ln()).collect();
    let mean = kahan_sum(logs.iter().copied()) / logs.len() as f64;
    LogVector::from_values(logs.into_iter().map(|l| l - mean).collect())
}

/// [`log_normalize`] over integer counts.
pub fn log_normalize_counts(counts: &[u64]) -> Result<LogVector> {
    let as_f64: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    log_normalize(&as_f64)
}

/// The public prior mean: the centered log transform of the public counts.
pub fn public_prior(alpha: &PublicCounts) -> Result<LogVector> {
    log_normalize(alpha.values())
}

/// Decay weights `w_i = min(1, S * N_i / C)`: words held by few users are
/// shrunk toward the prior.
pub fn decay_weights(supports: &[u64], s: f64, word_cap: f64) -> Result<WeightVector> {
    if supports.is_empty() {
        return Err(Error::EmptyInput("decay_weights supports"));
    }
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::Config(format!("weighting parameter S = {s} must be positive")));
    }
    if !word_cap.is_finite() || word_cap < 1.0 {
        return Err(Error::Config(format!("per-word cap C = {word_cap} must be at least 1")));
    }
    let values = supports
        .iter()
        .map(|&n| (s * n as f64 / word_cap).min(1.0))
        .collect();
    Ok(WeightVector { values, s, word_cap })
}

/// Posterior mean in log space:
/// `mu_i = rho * w_i * x_i + (1 - rho) * prior_i`.
pub fn posterior_mean(
    xhat: &LogVector,
    weights: &WeightVector,
    prior: &LogVector,
    rho: f64,
) -> Result<LogVector> {
    if !(0.0..=1.0).contains(&rho) || !rho.is_finite() {
        return Err(Error::Config(format!("prior mixing weight rho = {rho} outside [0, 1]")));
    }
    if xhat.len() != prior.len() {
        return Err(Error::DimensionMismatch { expected: xhat.len(), actual: prior.len() });
    }
    if xhat.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: xhat.len(), actual: weights.len() });
    }
    let values = xhat
        .values()
        .iter()
        .zip(weights.values())
        .zip(prior.values())
        .map(|((&x, &w), &p)| rho * w * x + (1.0 - rho) * p)
        .collect();
    LogVector::from_values(values)
}

/// Max-shifted softmax. Never overflows; entries that would underflow to
/// zero are floored at the smallest positive normal f64 so releases stay
/// strictly positive.
pub fn softmax(scores: &[f64]) -> Result<ProbDistribution> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("softmax input"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&v| (v - max).exp()).collect();
    ProbDistribution::from_nonnegative(exps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const LN_2: f64 = 0.693_147_180_559_945_3;

    #[test]
    fn log_normalize_example() {
        let x = log_normalize(&[3.0, 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(x.values()[0], LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(x.values()[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x.values()[2], -LN_2, epsilon = 1e-12);
    }

    #[test]
    fn log_normalize_constant_vector_is_zero() {
        let x = log_normalize(&[7.0; 5]).unwrap();
        for &v in x.values() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_normalize_rejects_bad_input() {
        assert!(log_normalize(&[]).is_err());
        assert!(log_normalize(&[1.0, -1.0]).is_err());
        assert!(log_normalize(&[f64::NAN]).is_err());
    }

    #[test]
    fn public_prior_example() {
        // alpha = [9, 0]: prior = +-log(10)/2.
        let alpha = PublicCounts::new(vec![9.0, 0.0]).unwrap();
        let prior = public_prior(&alpha).unwrap();
        assert_abs_diff_eq!(prior.values()[0], 1.151_292_546_497_022_8, epsilon = 1e-12);
        assert_abs_diff_eq!(prior.values()[1], -1.151_292_546_497_022_8, epsilon = 1e-12);
    }

    #[test]
    fn public_prior_matches_log_normalize_bit_for_bit() {
        let alpha = PublicCounts::new(vec![4.0, 2.5, 0.0, 11.0]).unwrap();
        let a = public_prior(&alpha).unwrap();
        let b = log_normalize(alpha.values()).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn decay_weights_example() {
        let w = decay_weights(&[5], 0.1, 1.0).unwrap();
        assert_abs_diff_eq!(w.values()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn decay_weights_saturate_at_one() {
        let w = decay_weights(&[0, 1, 100], 1.0, 2.0).unwrap();
        assert_eq!(w.values()[0], 0.0);
        assert_abs_diff_eq!(w.values()[1], 0.5, epsilon = 1e-12);
        assert_eq!(w.values()[2], 1.0);
    }

    #[test]
    fn decay_weights_validate_params() {
        assert!(decay_weights(&[1], 0.0, 1.0).is_err());
        assert!(decay_weights(&[1], -2.0, 1.0).is_err());
        assert!(decay_weights(&[1], 1.0, 0.5).is_err());
    }

    #[test]
    fn posterior_mean_blends() {
        let x = LogVector::from_values(vec![1.0, -1.0]).unwrap();
        let p = LogVector::from_values(vec![0.0, 0.0]).unwrap();
        let w = decay_weights(&[10, 10], 10.0, 1.0).unwrap(); // saturated at 1
        let mu = posterior_mean(&x, &w, &p, 0.5).unwrap();
        assert_abs_diff_eq!(mu.values()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(mu.values()[1], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn posterior_mean_extremes() {
        let x = LogVector::from_values(vec![2.0, -2.0]).unwrap();
        let p = LogVector::from_values(vec![0.3, -0.3]).unwrap();
        let w = decay_weights(&[1, 1], 1.0, 2.0).unwrap(); // w = 0.5
        let prior_only = posterior_mean(&x, &w, &p, 0.0).unwrap();
        assert_eq!(prior_only.values(), p.values());
        let data_only = posterior_mean(&x, &w, &p, 1.0).unwrap();
        assert_abs_diff_eq!(data_only.values()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(data_only.values()[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn posterior_mean_validates() {
        let x = LogVector::from_values(vec![1.0]).unwrap();
        let p = LogVector::from_values(vec![0.0, 0.0]).unwrap();
        let w = decay_weights(&[1], 1.0, 1.0).unwrap();
        assert!(posterior_mean(&x, &w, &p, 0.5).is_err());
        let p1 = LogVector::from_values(vec![0.0]).unwrap();
        assert!(posterior_mean(&x, &w, &p1, 1.5).is_err());
        assert!(posterior_mean(&x, &w, &p1, -0.1).is_err());
    }

    #[test]
    fn softmax_uniform_on_equal_scores() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p.values()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.values()[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn softmax_handles_large_scores() {
        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert_abs_diff_eq!(p.values()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn softmax_log_ratio_example() {
        // scores [ln 1, ln 3] -> probabilities [0.25, 0.75].
        let p = softmax(&[0.0, 3.0f64.ln()]).unwrap();
        assert_abs_diff_eq!(p.values()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(p.values()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_extreme_spread_stays_positive() {
        let mut scores = vec![0.0; 50];
        scores[0] = 2000.0;
        let p = softmax(&scores).unwrap();
        assert!(p.values().iter().all(|&v| v > 0.0));
        let sum = kahan_sum(p.values().iter().copied());
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_of_log_normalize_is_add_one_smoothing() {
        let counts = [4u64, 0, 7, 2];
        let x = log_normalize_counts(&counts).unwrap();
        let p = softmax(x.values()).unwrap();
        let total: f64 = counts.iter().map(|&c| (c + 1) as f64).sum();
        for (i, &c) in counts.iter().enumerate() {
            assert_abs_diff_eq!(p.values()[i], (c + 1) as f64 / total, epsilon = 1e-12);
        }
    }

    #[test]
    fn distribution_from_nonnegative_zero_becomes_uniform() {
        let p = ProbDistribution::from_nonnegative(vec![0.0, 0.0, 0.0]).unwrap();
        for &v in p.values() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn distribution_floors_zero_entries() {
        let p = ProbDistribution::from_nonnegative(vec![1.0, 0.0]).unwrap();
        assert!(p.values()[1] > 0.0);
        assert!(p.values()[1] <= f64::MIN_POSITIVE);
    }

    #[test]
    fn distribution_rejects_bad_sum() {
        assert!(ProbDistribution::from_normalized(vec![0.6, 0.6]).is_err());
        assert!(ProbDistribution::from_normalized(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn distribution_serde_round_trip() {
        let p = ProbDistribution::from_nonnegative(vec![1.0, 3.0]).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: ProbDistribution = serde_json::from_str(&json).unwrap();
        assert_eq!(back.values(), p.values());
    }
}
