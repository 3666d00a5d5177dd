//! Private hyperparameter selection for the Bayesian release.
//!
//! A candidate grid over (S, rho) is scored on a held-out user split with a
//! cross-entropy score, a noisy-min report picks the winner under an
//! `epsilon_1` budget, and the final release is drawn with the remaining
//! `(epsilon_2, delta)` budget. The combined spend is tracked in a
//! [`PrivacyLedger`].

use serde::{Deserialize, Serialize};

use crate::counts::{CountsDatabase, PublicCounts};
use crate::error::{Error, Result};
use crate::mechanisms::{
    calibration_sensitivity, gaussian_sigma, sample_noise, MechanismKind, NoiseKind,
    ParamsSnapshot, ReleasedDistribution, FLAG_GAUSSIAN_EXTRAPOLATED,
};
use crate::seed::child_seed;
use crate::sensitivity::SensitivityMethod;
use crate::transforms::{
    decay_weights, kahan_sum, log_normalize_counts, posterior_mean, public_prior, softmax,
    LogVector,
};

// ---------------------------------------------------------------------------
// Candidate grids
// ---------------------------------------------------------------------------

/// One hyperparameter candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub s: f64,
    pub rho: f64,
}

/// An ordered list of candidates to select among.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    candidates: Vec<Candidate>,
}

impl HyperGrid {
    pub fn new(candidates: Vec<Candidate>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::EmptyInput("hyperparameter grid"));
        }
        for c in &candidates {
            if !c.s.is_finite() || c.s <= 0.0 {
                return Err(Error::Config(format!("candidate S = {} must be positive", c.s)));
            }
            if !c.rho.is_finite() || c.rho <= 0.0 || c.rho > 1.0 {
                return Err(Error::Config(format!("candidate rho = {} outside (0, 1]", c.rho)));
            }
        }
        Ok(Self { candidates })
    }

    /// Cross product with `s_values` as the outer loop.
    pub fn from_axes(s_values: &[f64], rho_values: &[f64]) -> Result<Self> {
        let mut candidates = Vec::with_capacity(s_values.len() * rho_values.len());
        for &s in s_values {
            for &rho in rho_values {
                candidates.push(Candidate { s, rho });
            }
        }
        Self::new(candidates)
    }

    /// Default grid: S over the powers of ten from 1e-3 to 1e4, rho over
    /// {0.1, 0.3, 0.5, 0.7, 0.9} (40 candidates).
    pub fn default_grid() -> Self {
        let s_values: Vec<f64> = (-3..=4).map(|e| 10f64.powi(e)).collect();
        let rho_values = [0.1, 0.3, 0.5, 0.7, 0.9];
        Self::from_axes(&s_values, &rho_values).expect("default grid is valid")
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + kahan_sum(values.iter().map(|v| (v - max).exp())).ln()
}

/// Cross-entropy score of candidate scores `mu` against held-out counts:
/// `q = -sum_i c_i * (mu_i - logsumexp(mu))`. Lower is better; up to an
/// affine transform in the counts this is the KL divergence from the
/// normalized counts to `softmax(mu)`.
pub fn cross_entropy_score(counts: &[u64], mu: &LogVector) -> Result<f64> {
    if counts.len() != mu.len() {
        return Err(Error::DimensionMismatch { expected: mu.len(), actual: counts.len() });
    }
    let lse = log_sum_exp(mu.values());
    Ok(-kahan_sum(
        counts
            .iter()
            .zip(mu.values())
            .filter(|&(&c, _)| c > 0)
            .map(|(&c, &m)| c as f64 * (m - lse)),
    ))
}

/// Upper bound on how much one user's removal can move a candidate's score:
/// the maximum of the score shift through `mu` (`rho * ||c|| * gamma`, with
/// `gamma` the removal sensitivity of the weighted evidence) and the shift
/// through the counts themselves (`cap * sum_i |mu_i - logsumexp(mu)|`).
pub fn score_sensitivity(
    counts: &[u64],
    mu: &LogVector,
    rho: f64,
    gamma: f64,
    cap: u64,
) -> Result<f64> {
    if counts.len() != mu.len() {
        return Err(Error::DimensionMismatch { expected: mu.len(), actual: counts.len() });
    }
    if !(0.0..=1.0).contains(&rho) || rho == 0.0 {
        return Err(Error::Config(format!("rho = {rho} outside (0, 1]")));
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::Config(format!("gamma = {gamma} must be finite and non-negative")));
    }
    if cap < 1 {
        return Err(Error::Config("validation cap must be at least 1".into()));
    }
    let l2 = kahan_sum(counts.iter().map(|&c| (c as f64) * (c as f64))).sqrt();
    let lse = log_sum_exp(mu.values());
    let spread = kahan_sum(mu.values().iter().map(|m| (m - lse).abs()));
    Ok((rho * l2 * gamma).max(cap as f64 * spread))
}

/// Noisy-min selection: adds `Lap(2 * sensitivity / epsilon)` to each score
/// with an independent draw per candidate and returns the index of the
/// smallest noisy score (ties go to the smallest index) plus the noisy
/// scores themselves.
pub fn noisy_min_select(
    scores: &[f64],
    sensitivity: f64,
    epsilon: f64,
    seed: u64,
) -> Result<(usize, Vec<f64>)> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("selection scores"));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::Config(format!("selection epsilon = {epsilon} must be positive")));
    }
    if !sensitivity.is_finite() || sensitivity < 0.0 {
        return Err(Error::Config(format!(
            "selection sensitivity = {sensitivity} must be finite and non-negative"
        )));
    }
    let scale = 2.0 * sensitivity / epsilon;
    let mut noisy = Vec::with_capacity(scores.len());
    for (k, &q) in scores.iter().enumerate() {
        let draw = sample_noise(NoiseKind::Laplace, scale, 1, child_seed(seed, "noisy-min", k as u64))?;
        noisy.push(q + draw[0]);
    }
    let mut best = 0;
    for (k, &v) in noisy.iter().enumerate() {
        if v < noisy[best] {
            best = k;
        }
    }
    Ok((best, noisy))
}

// ---------------------------------------------------------------------------
// Privacy accounting
// ---------------------------------------------------------------------------

/// One budgeted operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub epsilon: f64,
    pub delta: f64,
}

/// Sequential composition by simple summation of the entries' budgets.
pub fn compose_privacy(entries: &[LedgerEntry]) -> (f64, f64) {
    (
        kahan_sum(entries.iter().map(|e| e.epsilon)),
        kahan_sum(entries.iter().map(|e| e.delta)),
    )
}

/// Ordered record of every budgeted operation in a pipeline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrivacyLedger {
    entries: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: impl Into<String>, epsilon: f64, delta: f64) {
        self.entries.push(LedgerEntry { label: label.into(), epsilon, delta });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Total `(epsilon, delta)` spent across all entries.
    pub fn total(&self) -> Result<(f64, f64)> {
        if self.entries.is_empty() {
            return Err(Error::EmptyInput("privacy ledger"));
        }
        Ok(compose_privacy(&self.entries))
    }
}

// ---------------------------------------------------------------------------
// End-to-end pipeline
// ---------------------------------------------------------------------------

/// Parameters of the split/score/select/release pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndToEndParams {
    /// Budget of the noisy-min selection (pure epsilon).
    pub epsilon1: f64,
    /// Budget of the final Gaussian release.
    pub epsilon2: f64,
    pub delta: f64,
    /// Per-word clamp applied to the training users.
    pub clip_cap: u64,
    /// Per-word clamp applied to the held-out users; defaults to `clip_cap`.
    pub validation_clip_cap: Option<u64>,
    /// Fraction of users assigned to the training side.
    pub split_fraction: f64,
    pub method: SensitivityMethod,
}

impl EndToEndParams {
    pub fn new(epsilon1: f64, epsilon2: f64, delta: f64, clip_cap: u64) -> Self {
        Self {
            epsilon1,
            epsilon2,
            delta,
            clip_cap,
            validation_clip_cap: None,
            split_fraction: 0.9,
            method: SensitivityMethod::BruteForce,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.epsilon1.is_finite() || self.epsilon1 <= 0.0 {
            return Err(Error::Config(format!("epsilon1 = {} must be positive", self.epsilon1)));
        }
        if !self.epsilon2.is_finite() || self.epsilon2 <= 0.0 {
            return Err(Error::Config(format!("epsilon2 = {} must be positive", self.epsilon2)));
        }
        if !self.delta.is_finite() || self.delta <= 0.0 || self.delta >= 1.0 {
            return Err(Error::Config(format!("delta = {} outside (0, 1)", self.delta)));
        }
        if self.clip_cap < 1 {
            return Err(Error::Config("per-word cap must be at least 1".into()));
        }
        if let Some(cap) = self.validation_clip_cap {
            if cap < 1 {
                return Err(Error::Config("validation per-word cap must be at least 1".into()));
            }
        }
        if !self.split_fraction.is_finite()
            || self.split_fraction <= 0.0
            || self.split_fraction >= 1.0
        {
            return Err(Error::Config(format!(
                "split fraction = {} outside (0, 1)",
                self.split_fraction
            )));
        }
        Ok(())
    }
}

/// A candidate together with everything computed for it during selection.
#[derive(Debug, Clone, Serialize)]
pub struct ScoredCandidate {
    pub index: usize,
    pub s: f64,
    pub rho: f64,
    /// Exact held-out cross-entropy score (lower is better).
    pub q: f64,
    /// Score after selection noise.
    pub noisy_q: f64,
    /// Removal sensitivity of the candidate's weighted evidence.
    pub gamma: f64,
    /// Gaussian scale the candidate's release would use.
    pub sigma: f64,
    #[serde(skip)]
    mu: LogVector,
}

/// Everything produced by the end-to-end pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct TuningOutcome {
    pub release: ReleasedDistribution,
    pub candidates: Vec<ScoredCandidate>,
    pub selected: usize,
    pub ledger: PrivacyLedger,
}

/// Splits users into train/validation, scores every grid candidate's
/// posterior mean against the held-out counts, privately selects the best,
/// and releases the winner's noised posterior. Total spend is
/// `(epsilon1 + epsilon2, delta)`.
pub fn end_to_end_dp(
    db: &CountsDatabase,
    alpha: &PublicCounts,
    grid: &HyperGrid,
    params: &EndToEndParams,
    seed: u64,
) -> Result<TuningOutcome> {
    params.validate()?;
    if alpha.len() != db.vocab_size() {
        return Err(Error::DimensionMismatch { expected: db.vocab_size(), actual: alpha.len() });
    }
    let (train, validation) = db.split_users(
        params.split_fraction,
        child_seed(seed, "train-validation-split", 0),
    )?;
    let validation_cap = params.validation_clip_cap.unwrap_or(params.clip_cap);
    let train = train.apply_contribution_limits(params.clip_cap, u64::MAX);
    let validation = validation.apply_contribution_limits(validation_cap, u64::MAX);
    let holdout_counts = validation.totals().to_vec();

    let prior = public_prior(alpha)?;
    let xhat = log_normalize_counts(train.totals())?;
    let word_cap = params.clip_cap as f64;

    let mut candidates = Vec::with_capacity(grid.len());
    for (index, cand) in grid.candidates().iter().enumerate() {
        let weights = decay_weights(train.supports(), cand.s, word_cap)?;
        let estimate = calibration_sensitivity(&train, cand.s, word_cap, params.method)?;
        let mu = posterior_mean(&xhat, &weights, &prior, cand.rho)?;
        let sigma = gaussian_sigma(estimate.gamma, cand.rho, params.epsilon2, params.delta)?;
        let q = cross_entropy_score(&holdout_counts, &mu)?;
        candidates.push(ScoredCandidate {
            index,
            s: cand.s,
            rho: cand.rho,
            q,
            noisy_q: f64::NAN,
            gamma: estimate.gamma,
            sigma,
            mu,
        });
    }

    // One shared sensitivity: the worst case over the candidates being
    // compared.
    let mut selection_sensitivity = 0.0f64;
    for c in &candidates {
        let dq = score_sensitivity(&holdout_counts, &c.mu, c.rho, c.gamma, validation_cap)?;
        selection_sensitivity = selection_sensitivity.max(dq);
    }
    let scores: Vec<f64> = candidates.iter().map(|c| c.q).collect();
    let (selected, noisy) = noisy_min_select(
        &scores,
        selection_sensitivity,
        params.epsilon1,
        child_seed(seed, "noisy-min", u64::MAX),
    )?;
    for (c, n) in candidates.iter_mut().zip(noisy) {
        c.noisy_q = n;
    }

    let winner = &candidates[selected];
    let noise = sample_noise(
        NoiseKind::Gaussian,
        winner.sigma,
        winner.mu.len(),
        child_seed(seed, "release-noise", selected as u64),
    )?;
    let scored: Vec<f64> = winner.mu.values().iter().zip(&noise).map(|(m, e)| m + e).collect();
    let theta = softmax(&scored)?;

    let mut ledger = PrivacyLedger::new();
    ledger.push("bayesian-gaussian", params.epsilon2, params.delta);
    ledger.push("noisy-min-selection", params.epsilon1, 0.0);
    let (eps_total, delta_total) = ledger.total()?;

    let mut flags = Vec::new();
    if params.epsilon2 >= 1.0 {
        flags.push(FLAG_GAUSSIAN_EXTRAPOLATED.to_string());
    }
    let release = ReleasedDistribution {
        mechanism: MechanismKind::BayesianTuned,
        params: ParamsSnapshot {
            epsilon: Some(eps_total),
            delta: Some(delta_total),
            epsilon_tuning: Some(params.epsilon1),
            epsilon_release: Some(params.epsilon2),
            s: Some(winner.s),
            rho: Some(winner.rho),
            word_cap: Some(params.clip_cap),
            sensitivity_method: Some(params.method),
            gamma: Some(winner.gamma),
            ..ParamsSnapshot::default()
        },
        seed,
        epsilon_spent: eps_total,
        delta: delta_total,
        noise_scale: winner.sigma,
        flags,
        theta,
    };
    Ok(TuningOutcome { release, candidates, selected, ledger })
}
