//! TOML experiment configuration: parsing, validation, and default resolution.

use std::path::{Path, PathBuf};

use ngram_dp_core::{Error, Result, SensitivityMethod};
use serde::{Deserialize, Serialize};

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Mechanism selector as written in config files and CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismChoice {
    Bayesian,
    BayesianTuned,
    Laplace,
    ModifiedLaplace,
    KAnonymity,
}

impl std::fmt::Display for MechanismChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            MechanismChoice::Bayesian => "bayesian",
            MechanismChoice::BayesianTuned => "bayesian-tuned",
            MechanismChoice::Laplace => "laplace",
            MechanismChoice::ModifiedLaplace => "modified-laplace",
            MechanismChoice::KAnonymity => "k-anonymity",
        };
        write!(f, "{name}")
    }
}

/// How to estimate release sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivityChoice {
    #[default]
    BruteForce,
    WorstCaseBound,
}

impl From<SensitivityChoice> for SensitivityMethod {
    fn from(choice: SensitivityChoice) -> Self {
        match choice {
            SensitivityChoice::BruteForce => SensitivityMethod::BruteForce,
            SensitivityChoice::WorstCaseBound => SensitivityMethod::WorstCaseBound,
        }
    }
}

/// Parameters for generating a synthetic Zipf corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub vocab_size: usize,
    pub num_users: usize,
    pub tokens_per_user: u64,
    #[serde(default = "default_zipf_exponent")]
    pub zipf_exponent: f64,
}

fn default_zipf_exponent() -> f64 {
    1.1
}

/// On-disk inputs: a counts table, a vocabulary file, and optionally a public corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub counts: PathBuf,
    pub vocabulary: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_corpus: Option<PathBuf>,
}

/// Where the experiment's data comes from; exactly one source must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<FileData>,
}

/// The single mechanism this run releases with, plus its raw parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismConfig {
    pub kind: MechanismChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Decay-weight scale S; defaults to 1.0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Per-user per-word cap C; defaults to 1 below a million users, else 10.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_cap: Option<u64>,
    /// Per-user total cap T; defaults to max(1, num_users / 1000).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_cap: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u64>,
    #[serde(default)]
    pub sensitivity: SensitivityChoice,
}

fn default_delta() -> f64 {
    1e-5
}

/// Hyperparameter tuning section; present only for tuned runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_tuning: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_release: Option<f64>,
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_word_cap: Option<u64>,
}

fn default_split_fraction() -> f64 {
    0.9
}

/// Which quality metrics to report after a release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_true")]
    pub kl: bool,
    #[serde(default)]
    pub perplexity: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

/// Membership-inference sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilons: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default = "default_sweep_mechanisms")]
    pub mechanisms: Vec<MechanismChoice>,
}

fn default_trials() -> u64 {
    200
}

/// Utility-sweep settings: vary epsilon and optionally one extra axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default = "default_sweep_mechanisms")]
    pub mechanisms: Vec<MechanismChoice>,
    /// Extra axis: regenerate the synthetic corpus at each of these user counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users: Option<Vec<usize>>,
    /// Extra axis: perturb public counts with Gaussian noise at each scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_noise: Option<Vec<f64>>,
}

fn default_seeds() -> u64 {
    1
}

fn default_sweep_mechanisms() -> Vec<MechanismChoice> {
    vec![MechanismChoice::Bayesian, MechanismChoice::Laplace]
}

/// A full experiment description as parsed from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed for every random choice in the run; there is no wall-clock fallback.
    pub root_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    pub mechanism: MechanismConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tune: Option<TuneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A config together with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub sha256: String,
}

impl LoadedConfig {
    /// Resolves a config-relative path against the config file's directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }
}

/// Reads, parses, and validates a config file.
pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let raw = std::fs::read(path)
        .map_err(|e| config_err(format!("cannot read config file {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&raw)
        .map_err(|_| config_err(format!("config file {} is not valid UTF-8", path.display())))?;
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| config_err(format!("invalid config: {}", e.message())))?;
    config.validate()?;
    let base_dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(LoadedConfig { config, base_dir, sha256: sha256_hex(&raw) })
}

/// Hex-encoded SHA-256 of raw bytes; used to fingerprint the config in manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    use std::fmt::Write;
    let digest = sha2::Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

impl ExperimentConfig {
    /// Checks cross-field invariants; every error names the offending field.
    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, &self.data.files) {
            (None, None) => {
                return Err(config_err(
                    "data: exactly one of data.synthetic or data.files is required",
                ))
            }
            (Some(_), Some(_)) => {
                return Err(config_err(
                    "data: data.synthetic and data.files are mutually exclusive",
                ))
            }
            _ => {}
        }
        if let Some(synth) = &self.data.synthetic {
            if synth.vocab_size == 0 {
                return Err(config_err("data.synthetic.vocab_size: must be positive"));
            }
            if synth.num_users == 0 {
                return Err(config_err("data.synthetic.num_users: must be positive"));
            }
            if synth.tokens_per_user == 0 {
                return Err(config_err("data.synthetic.tokens_per_user: must be positive"));
            }
            if !(synth.zipf_exponent > 0.0) {
                return Err(config_err("data.synthetic.zipf_exponent: must be positive"));
            }
        }
        self.validate_mechanism()?;
        if let Some(tune) = &self.tune {
            self.validate_tune(tune)?;
        }
        if let Some(eval) = &self.eval {
            if eval.perplexity && eval.heldout.is_none() {
                return Err(config_err(
                    "eval.heldout: required when eval.perplexity is enabled",
                ));
            }
        }
        if let Some(attack) = &self.attack {
            self.validate_attack(attack)?;
        }
        if let Some(sweep) = &self.sweep {
            self.validate_sweep(sweep)?;
        }
        Ok(())
    }

    fn validate_mechanism(&self) -> Result<()> {
        let mech = &self.mechanism;
        let needs_epsilon = mech.kind != MechanismChoice::KAnonymity;
        match mech.epsilon {
            None if needs_epsilon => {
                return Err(config_err(format!(
                    "mechanism.epsilon: required for kind = \"{}\"",
                    mech.kind
                )))
            }
            Some(eps) if !(eps > 0.0 && eps.is_finite()) => {
                return Err(config_err("mechanism.epsilon: must be positive and finite"))
            }
            _ => {}
        }
        if !(mech.delta > 0.0 && mech.delta < 1.0) {
            return Err(config_err("mechanism.delta: must lie in (0, 1)"));
        }
        if let Some(s) = mech.s {
            if !(s > 0.0 && s.is_finite()) {
                return Err(config_err("mechanism.s: must be positive and finite"));
            }
        }
        if let Some(rho) = mech.rho {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(config_err("mechanism.rho: must lie in (0, 1]"));
            }
        }
        if mech.word_cap == Some(0) {
            return Err(config_err("mechanism.word_cap: must be positive"));
        }
        if mech.total_cap == Some(0) {
            return Err(config_err("mechanism.total_cap: must be positive"));
        }
        if mech.kind == MechanismChoice::KAnonymity && mech.k.is_none() {
            return Err(config_err("mechanism.k: required for kind = \"k-anonymity\""));
        }
        if mech.k == Some(0) {
            return Err(config_err("mechanism.k: must be positive"));
        }
        Ok(())
    }

    fn validate_tune(&self, tune: &TuneConfig) -> Result<()> {
        if !(tune.split_fraction > 0.0 && tune.split_fraction < 1.0) {
            return Err(config_err("tune.split_fraction: must lie in (0, 1)"));
        }
        for (name, grid) in [("tune.s_grid", &tune.s_grid), ("tune.rho_grid", &tune.rho_grid)] {
            if let Some(values) = grid {
                if values.is_empty() {
                    return Err(config_err(format!("{name}: must not be empty")));
                }
            }
        }
        if tune.validation_word_cap == Some(0) {
            return Err(config_err("tune.validation_word_cap: must be positive"));
        }
        let total = self.mechanism.epsilon.unwrap_or(0.0);
        match (tune.epsilon_tuning, tune.epsilon_release) {
            (Some(e1), _) if !(e1 > 0.0 && e1.is_finite()) => {
                Err(config_err("tune.epsilon_tuning: must be positive and finite"))
            }
            (_, Some(e2)) if !(e2 > 0.0 && e2.is_finite()) => {
                Err(config_err("tune.epsilon_release: must be positive and finite"))
            }
            (Some(e1), Some(e2)) if ((e1 + e2) - total).abs() > 1e-9 * total.max(1.0) => {
                Err(config_err(format!(
                    "tune.epsilon_tuning + tune.epsilon_release: {} + {} does not sum to \
                     mechanism.epsilon = {total}",
                    e1, e2
                )))
            }
            (Some(e1), None) if e1 >= total => Err(config_err(
                "tune.epsilon_tuning: must leave a positive release budget under mechanism.epsilon",
            )),
            (None, Some(e2)) if e2 >= total => Err(config_err(
                "tune.epsilon_release: must leave a positive tuning budget under mechanism.epsilon",
            )),
            _ => Ok(()),
        }
    }

    fn validate_attack(&self, attack: &AttackConfig) -> Result<()> {
        if attack.epsilons.is_empty() {
            return Err(config_err("attack.epsilons: must not be empty"));
        }
        if attack.epsilons.iter().any(|e| !(e > &0.0 && e.is_finite())) {
            return Err(config_err("attack.epsilons: all values must be positive and finite"));
        }
        if attack.trials == 0 {
            return Err(config_err("attack.trials: must be positive"));
        }
        if attack.mechanisms.is_empty() {
            return Err(config_err("attack.mechanisms: must not be empty"));
        }
        for mech in &attack.mechanisms {
            if matches!(mech, MechanismChoice::KAnonymity | MechanismChoice::BayesianTuned) {
                return Err(config_err(format!(
                    "attack.mechanisms: \"{mech}\" does not support an epsilon sweep"
                )));
            }
        }
        Ok(())
    }

    fn validate_sweep(&self, sweep: &SweepConfig) -> Result<()> {
        if sweep.epsilons.is_empty() {
            return Err(config_err("sweep.epsilons: must not be empty"));
        }
        if sweep.epsilons.iter().any(|e| !(e > &0.0 && e.is_finite())) {
            return Err(config_err("sweep.epsilons: all values must be positive and finite"));
        }
        if sweep.seeds == 0 {
            return Err(config_err("sweep.seeds: must be positive"));
        }
        if sweep.mechanisms.is_empty() {
            return Err(config_err("sweep.mechanisms: must not be empty"));
        }
        if sweep.mechanisms.contains(&MechanismChoice::KAnonymity) {
            return Err(config_err(
                "sweep.mechanisms: \"k-anonymity\" does not support an epsilon sweep",
            ));
        }
        if sweep.users.is_some() && sweep.public_noise.is_some() {
            return Err(config_err(
                "sweep.users and sweep.public_noise: at most one extra axis per sweep",
            ));
        }
        if let Some(users) = &sweep.users {
            if users.is_empty() || users.contains(&0) {
                return Err(config_err("sweep.users: must be non-empty positive counts"));
            }
            if self.data.synthetic.is_none() {
                return Err(config_err("sweep.users: requires data.synthetic"));
            }
        }
        if let Some(noise) = &sweep.public_noise {
            if noise.is_empty() || noise.iter().any(|x| !(x >= &0.0 && x.is_finite())) {
                return Err(config_err(
                    "sweep.public_noise: must be non-empty non-negative scales",
                ));
            }
            if let Some(files) = &self.data.files {
                if files.public_corpus.is_none() {
                    return Err(config_err(
                        "sweep.public_noise: requires data.files.public_corpus",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Per-user per-word cap, defaulted from the database size when unset.
    pub fn word_cap(&self, num_users: usize) -> u64 {
        self.mechanism
            .word_cap
            .unwrap_or(if num_users < 1_000_000 { 1 } else { 10 })
    }

    /// Per-user total cap, defaulted from the database size when unset.
    pub fn total_cap(&self, num_users: usize) -> u64 {
        self.mechanism
            .total_cap
            .unwrap_or_else(|| (num_users as u64 / 1000).max(1))
    }

    /// Splits the declared budget into (tuning, release) shares for tuned runs.
    pub fn tuning_split(&self, total_epsilon: f64) -> (f64, f64) {
        let tune = self.tune.as_ref();
        let e1 = tune.and_then(|t| t.epsilon_tuning);
        let e2 = tune.and_then(|t| t.epsilon_release);
        match (e1, e2) {
            (Some(a), Some(b)) => (a, b),
            (Some(a), None) => (a, total_epsilon - a),
            (None, Some(b)) => (total_epsilon - b, b),
            (None, None) => (total_epsilon / 3.0, 2.0 * total_epsilon / 3.0),
        }
    }
}
