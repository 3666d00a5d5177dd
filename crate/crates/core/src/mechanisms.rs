//! Release mechanisms: the Bayesian Gaussian mechanism and three baselines.
//!
//! Every mechanism consumes a counts database (plus public counts where a
//! prior is used) and produces a [`ReleasedDistribution`]: a strictly
//! positive probability vector over the vocabulary together with a full
//! provenance record (parameters, noise scale, seed, budget actually spent).
//! Given identical inputs and seed, every mechanism is bit-reproducible.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::counts::{CountsDatabase, PublicCounts};
use crate::error::{Error, Result};
use crate::seed::{child_seed, rng_from_seed};
use crate::sensitivity::{
    brute_force_sensitivity, worst_case_bound, SensitivityEstimate, SensitivityMethod,
};
use crate::transforms::{
    decay_weights, log_normalize_counts, posterior_mean, public_prior, softmax, ProbDistribution,
};

/// Marks releases where the Gaussian calibration formula was applied at
/// epsilon >= 1, outside the classical regime it is derived for.
pub const FLAG_GAUSSIAN_EXTRAPOLATED: &str = "classical-gaussian-extrapolated";

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Laplace,
    Gaussian,
}

/// Draws an i.i.d. noise vector deterministically from a seed.
///
/// Laplace uses the inverse-CDF transform of a uniform draw; Gaussian uses a
/// standard normal transform. A zero scale returns exact zeros so noiseless
/// limits stay bit-exact.
pub fn sample_noise(kind: NoiseKind, scale: f64, len: usize, seed: u64) -> Result<Vec<f64>> {
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::Config(format!("noise scale {scale} must be finite and non-negative")));
    }
    if scale == 0.0 {
        return Ok(vec![0.0; len]);
    }
    let mut rng = rng_from_seed(seed);
    let noise = match kind {
        NoiseKind::Laplace => (0..len)
            .map(|_| {
                // u uniform on (-1/2, 1/2), excluding the endpoint where the
                // inverse CDF diverges.
                let u = loop {
                    let v: f64 = rng.gen();
                    if v > 0.0 {
                        break v - 0.5;
                    }
                };
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect(),
        NoiseKind::Gaussian => (0..len)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                scale * z
            })
            .collect(),
    };
    Ok(noise)
}

/// Gaussian scale for the posterior release:
/// `sigma = rho * gamma * sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn gaussian_sigma(gamma: f64, rho: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::Config(format!("sensitivity {gamma} must be finite and non-negative")));
    }
    if !(0.0..=1.0).contains(&rho) || rho == 0.0 {
        return Err(Error::Config(format!("rho = {rho} outside (0, 1]")));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon = {epsilon} must be positive")));
    }
    if !delta.is_finite() || delta <= 0.0 || delta >= 1.25 {
        return Err(Error::Config(format!("delta = {delta} must lie in (0, 1.25)")));
    }
    Ok(rho * gamma * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

// ---------------------------------------------------------------------------
// Release provenance
// ---------------------------------------------------------------------------

/// Which mechanism produced a release.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismKind {
    Bayesian,
    BayesianTuned,
    Laplace,
    ModifiedLaplace,
    KAnonymity,
}

impl std::fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            MechanismKind::Bayesian => "bayesian",
            MechanismKind::BayesianTuned => "bayesian-tuned",
            MechanismKind::Laplace => "laplace",
            MechanismKind::ModifiedLaplace => "modified-laplace",
            MechanismKind::KAnonymity => "k-anonymity",
        };
        write!(f, "{name}")
    }
}

/// Parameter snapshot stored with a release; unset fields are omitted from
/// the serialized form.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamsSnapshot {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_tuning: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_release: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub word_cap: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_cap: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity_method: Option<SensitivityMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

/// A released distribution plus everything needed to audit or replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleasedDistribution {
    pub mechanism: MechanismKind,
    pub params: ParamsSnapshot,
    pub seed: u64,
    pub epsilon_spent: f64,
    pub delta: f64,
    /// Gaussian sigma or Laplace scale actually used (0 for k-anonymity).
    pub noise_scale: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    pub theta: ProbDistribution,
}

impl ReleasedDistribution {
    /// Canonical serialized form (used for release files; byte-stable for a
    /// fixed input and seed).
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Parse(format!("release serialization: {e}")))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn write_json(&self, mut writer: impl std::io::Write) -> Result<()> {
        writer.write_all(&self.to_json_bytes()?)?;
        Ok(())
    }

    pub fn read_json(reader: impl std::io::Read) -> Result<Self> {
        serde_json::from_reader(reader).map_err(|e| Error::Parse(format!("release file: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Bayesian mechanism
// ---------------------------------------------------------------------------

/// Parameters of the Bayesian Gaussian release.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesianParams {
    pub epsilon: f64,
    pub delta: f64,
    /// Weighting hyperparameter S of the decay weights.
    pub s: f64,
    /// Per-word clamp C applied to every user before aggregation.
    pub word_cap: u64,
    /// Mixing weight of the private evidence versus the public prior.
    pub rho: f64,
}

impl BayesianParams {
    fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon = {} must be positive", self.epsilon)));
        }
        if !self.delta.is_finite() || self.delta <= 0.0 || self.delta >= 1.0 {
            return Err(Error::Config(format!("delta = {} outside (0, 1)", self.delta)));
        }
        if !self.s.is_finite() || self.s <= 0.0 {
            return Err(Error::Config(format!("S = {} must be positive", self.s)));
        }
        if self.word_cap < 1 {
            return Err(Error::Config("per-word cap C must be at least 1".into()));
        }
        if !self.rho.is_finite() || self.rho <= 0.0 || self.rho > 1.0 {
            return Err(Error::Config(format!("rho = {} outside (0, 1]", self.rho)));
        }
        Ok(())
    }
}

/// Computes the calibration sensitivity on an already clamped database.
pub(crate) fn calibration_sensitivity(
    clamped: &CountsDatabase,
    s: f64,
    word_cap: f64,
    method: SensitivityMethod,
) -> Result<SensitivityEstimate> {
    match method {
        SensitivityMethod::BruteForce => brute_force_sensitivity(clamped, s, word_cap),
        SensitivityMethod::WorstCaseBound => {
            let supports = clamped.supports();
            let xhat = log_normalize_counts(clamped.totals())?;
            // The bound is undefined for words nobody holds; they contribute
            // exactly zero to the true sensitivity, so restrict to the rest.
            let held: Vec<usize> = (0..supports.len()).filter(|&i| supports[i] > 0).collect();
            if held.is_empty() {
                return Ok(SensitivityEstimate {
                    gamma: 0.0,
                    method,
                    argmax_user: None,
                });
            }
            let xs: Vec<f64> = held.iter().map(|&i| xhat.values()[i]).collect();
            let ns: Vec<u64> = held.iter().map(|&i| supports[i]).collect();
            worst_case_bound(&xs, &ns, s, word_cap, clamped.vocab_size())
        }
    }
}

/// The Bayesian Gaussian release: clamp, aggregate, transform to log space,
/// blend with the public prior, add Gaussian noise calibrated to the
/// user-removal sensitivity, and map back through softmax.
pub fn bayesian_dp(
    db: &CountsDatabase,
    alpha: &PublicCounts,
    params: &BayesianParams,
    method: SensitivityMethod,
    seed: u64,
) -> Result<ReleasedDistribution> {
    params.validate()?;
    if alpha.len() != db.vocab_size() {
        return Err(Error::DimensionMismatch { expected: db.vocab_size(), actual: alpha.len() });
    }
    let word_cap = params.word_cap as f64;
    let clamped = db.apply_contribution_limits(params.word_cap, u64::MAX);
    let xhat = log_normalize_counts(clamped.totals())?;
    let weights = decay_weights(clamped.supports(), params.s, word_cap)?;
    let estimate = calibration_sensitivity(&clamped, params.s, word_cap, method)?;
    let sigma = gaussian_sigma(estimate.gamma, params.rho, params.epsilon, params.delta)?;
    let prior = public_prior(alpha)?;
    let mu = posterior_mean(&xhat, &weights, &prior, params.rho)?;
    let noise = sample_noise(
        NoiseKind::Gaussian,
        sigma,
        mu.len(),
        child_seed(seed, "bayesian-noise", 0),
    )?;
    let scores: Vec<f64> = mu.values().iter().zip(&noise).map(|(m, e)| m + e).collect();
    let theta = softmax(&scores)?;
    let mut flags = Vec::new();
    if params.epsilon >= 1.0 {
        flags.push(FLAG_GAUSSIAN_EXTRAPOLATED.to_string());
    }
    Ok(ReleasedDistribution {
        mechanism: MechanismKind::Bayesian,
        params: ParamsSnapshot {
            epsilon: Some(params.epsilon),
            delta: Some(params.delta),
            s: Some(params.s),
            rho: Some(params.rho),
            word_cap: Some(params.word_cap),
            sensitivity_method: Some(estimate.method),
            gamma: Some(estimate.gamma),
            ..ParamsSnapshot::default()
        },
        seed,
        epsilon_spent: params.epsilon,
        delta: params.delta,
        noise_scale: sigma,
        flags,
        theta,
    })
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Laplace baseline: adds `Lap(total_cap / epsilon)` to each aggregate count,
/// thresholds at zero, and normalizes (uniform if everything is zeroed).
///
/// The database must already be limited so no user contributes more than
/// `total_cap` counts overall; that cap is the l1 sensitivity the noise is
/// calibrated to.
pub fn laplace_baseline(
    db: &CountsDatabase,
    total_cap: u64,
    epsilon: f64,
    seed: u64,
) -> Result<ReleasedDistribution> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon = {epsilon} must be positive")));
    }
    if total_cap < 1 {
        return Err(Error::Config("per-user total cap must be at least 1".into()));
    }
    let scale = total_cap as f64 / epsilon;
    let noise = sample_noise(
        NoiseKind::Laplace,
        scale,
        db.vocab_size(),
        child_seed(seed, "laplace-noise", 0),
    )?;
    let noised: Vec<f64> = db
        .totals()
        .iter()
        .zip(&noise)
        .map(|(&c, e)| (c as f64 + e).max(0.0))
        .collect();
    let theta = ProbDistribution::from_nonnegative(noised)?;
    Ok(ReleasedDistribution {
        mechanism: MechanismKind::Laplace,
        params: ParamsSnapshot {
            epsilon: Some(epsilon),
            total_cap: Some(total_cap),
            ..ParamsSnapshot::default()
        },
        seed,
        epsilon_spent: epsilon,
        delta: 0.0,
        noise_scale: scale,
        flags: Vec::new(),
        theta,
    })
}

/// Deterministic part of the modified Laplace baseline and its brute-force
/// l1 sensitivity.
///
/// Per word i the pre-noise value is
/// `sum_n (dc_n_i / c_i) * (dc_n_i / ||dc_n||_1)` (with 0/0 = 0, and the
/// public term `alpha_i / ||alpha||_1` where c_i = 0), i.e. the
/// contribution-weighted average of the users' normalized counts.
fn modified_laplace_deterministic(db: &CountsDatabase, alpha: &PublicCounts) -> (Vec<f64>, f64) {
    let v = db.vocab_size();
    let alpha_total = alpha.l1_norm();
    let alpha_tilde: Vec<f64> = alpha.values().iter().map(|a| a / alpha_total).collect();
    let totals = db.totals();
    // weighted_sq[i] = sum_n dc_n_i * (dc_n_i / total_n)
    let mut weighted_sq = vec![0.0f64; v];
    for user in db.users() {
        let user_total = user.total();
        if user_total == 0 {
            continue;
        }
        for (idx, cnt) in user.counts() {
            weighted_sq[idx] += cnt as f64 * (cnt as f64 / user_total as f64);
        }
    }
    let mean_at = |weighted: f64, total: u64, idx: usize| -> f64 {
        if total > 0 {
            weighted / total as f64
        } else {
            alpha_tilde[idx]
        }
    };
    let mean: Vec<f64> = (0..v)
        .map(|i| mean_at(weighted_sq[i], totals[i], i))
        .collect();
    // Brute-force l1 sensitivity over user removals; only the removed user's
    // support changes.
    let mut sens = 0.0f64;
    for user in db.users() {
        let user_total = user.total();
        let mut l1 = 0.0;
        for (idx, cnt) in user.counts() {
            let own = if user_total > 0 {
                cnt as f64 * (cnt as f64 / user_total as f64)
            } else {
                0.0
            };
            let removed = mean_at(weighted_sq[idx] - own, totals[idx] - cnt, idx);
            l1 += (mean[idx] - removed).abs();
        }
        sens = sens.max(l1);
    }
    (mean, sens)
}

/// Modified Laplace baseline: a contribution-weighted blend of normalized
/// user counts and the normalized public counts, noised with a Laplace scale
/// set by the brute-force l1 sensitivity of the blend.
pub fn modified_laplace_baseline(
    db: &CountsDatabase,
    alpha: &PublicCounts,
    epsilon: f64,
    seed: u64,
) -> Result<ReleasedDistribution> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon = {epsilon} must be positive")));
    }
    if alpha.len() != db.vocab_size() {
        return Err(Error::DimensionMismatch { expected: db.vocab_size(), actual: alpha.len() });
    }
    if alpha.l1_norm() <= 0.0 {
        return Err(Error::Config("public counts must have positive total mass".into()));
    }
    let (mean, sens) = modified_laplace_deterministic(db, alpha);
    let scale = sens / epsilon;
    let noise = sample_noise(
        NoiseKind::Laplace,
        scale,
        mean.len(),
        child_seed(seed, "modified-laplace-noise", 0),
    )?;
    let noised: Vec<f64> = mean
        .iter()
        .zip(&noise)
        .map(|(m, e)| (m + e).max(0.0))
        .collect();
    let theta = ProbDistribution::from_nonnegative(noised)?;
    Ok(ReleasedDistribution {
        mechanism: MechanismKind::ModifiedLaplace,
        params: ParamsSnapshot {
            epsilon: Some(epsilon),
            ..ParamsSnapshot::default()
        },
        seed,
        epsilon_spent: epsilon,
        delta: 0.0,
        noise_scale: scale,
        flags: Vec::new(),
        theta,
    })
}

/// k-anonymity suppression: words held by fewer than `k` users are removed,
/// the survivors are renormalized, and suppressed words receive an additive
/// floor of `1 / (V * 10^6)` before the final normalization. Not
/// differentially private; released with a zero budget entry for bookkeeping.
pub fn k_anonymize(db: &CountsDatabase, k: u64) -> Result<ReleasedDistribution> {
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let v = db.vocab_size();
    let floor = 1.0 / (v as f64 * 1e6);
    let survivor_total: u64 = db
        .totals()
        .iter()
        .zip(db.supports())
        .filter(|&(_, &n)| n >= k)
        .map(|(&c, _)| c)
        .sum();
    let theta = if survivor_total == 0 {
        ProbDistribution::uniform(v)
    } else {
        let values: Vec<f64> = db
            .totals()
            .iter()
            .zip(db.supports())
            .map(|(&c, &n)| {
                if n >= k {
                    c as f64 / survivor_total as f64
                } else {
                    floor
                }
            })
            .collect();
        ProbDistribution::from_nonnegative(values)?
    };
    Ok(ReleasedDistribution {
        mechanism: MechanismKind::KAnonymity,
        params: ParamsSnapshot {
            k: Some(k),
            floor: Some(floor),
            ..ParamsSnapshot::default()
        },
        seed: 0,
        epsilon_spent: 0.0,
        delta: 0.0,
        noise_scale: 0.0,
        flags: Vec::new(),
        theta,
    })
}
