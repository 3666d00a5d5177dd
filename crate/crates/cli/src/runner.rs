//! Executes experiments described by a config: loads data, runs the selected
//! mechanism, and writes releases, metric CSVs, and a run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ngram_dp_core::eval::{
    conditional_perplexity, degrade_public, filter_covered, kl_divergence, membership_inference,
    synthetic_corpus,
};
use ngram_dp_core::seed::child_seed;
use ngram_dp_core::{
    bayesian_dp, end_to_end_dp, k_anonymize, laplace_baseline, modified_laplace_baseline,
    AttackReport, BayesianParams, CountsDatabase, EndToEndParams, Error, HyperGrid, PrivacyLedger,
    ProbDistribution, PublicCounts, ReleasedDistribution, Result, TuningOutcome,
    UserContribution, Vocabulary,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, LoadedConfig, MechanismChoice};

const DEFAULT_S_AXIS: [f64; 8] =
    [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4];
const DEFAULT_RHO_AXIS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// In-memory inputs of one run: the raw counts, the clamped view every
/// mechanism consumes, and the optional public prior.
pub struct ExperimentData {
    pub vocab: Arc<Vocabulary>,
    pub raw: CountsDatabase,
    pub db: CountsDatabase,
    pub alpha: Option<PublicCounts>,
    pub word_cap: u64,
    pub total_cap: u64,
}

impl ExperimentData {
    fn alpha(&self) -> Result<&PublicCounts> {
        self.alpha.as_ref().ok_or_else(|| {
            config_err("data.files.public_corpus: required by mechanisms that use a public prior")
        })
    }

    /// Normalized raw private counts; the reference distribution for KL.
    fn reference(&self) -> Result<ProbDistribution> {
        let totals: Vec<f64> = self.raw.totals().iter().map(|c| *c as f64).collect();
        ProbDistribution::from_nonnegative(totals)
    }
}

/// Loads the configured data source, applies per-user limits, and resolves
/// cap defaults. `users_override` and `prior_noise` serve sweep axes.
pub fn load_data(
    loaded: &LoadedConfig,
    run_seed: u64,
    users_override: Option<usize>,
    prior_noise: Option<(f64, u64)>,
) -> Result<ExperimentData> {
    let config = &loaded.config;
    let (vocab, raw, alpha) = if let Some(synth) = &config.data.synthetic {
        let users = users_override.unwrap_or(synth.num_users);
        let (vocab, raw, alpha) = synthetic_corpus(
            synth.vocab_size,
            users,
            synth.tokens_per_user,
            synth.zipf_exponent,
            child_seed(run_seed, "synthetic-data", 0),
        )?;
        (vocab, raw, Some(alpha))
    } else if let Some(files) = &config.data.files {
        let vocab = Arc::new(Vocabulary::read_path(loaded.resolve(&files.vocabulary))?);
        let raw = CountsDatabase::read_tsv_path(loaded.resolve(&files.counts), Arc::clone(&vocab))?;
        let alpha = match &files.public_corpus {
            Some(path) => {
                let text = fs::read_to_string(loaded.resolve(path))?;
                Some(PublicCounts::from_corpus(&text, &vocab)?)
            }
            None => None,
        };
        (vocab, raw, alpha)
    } else {
        return Err(config_err("data: exactly one of data.synthetic or data.files is required"));
    };
    let alpha = match (alpha, prior_noise) {
        (Some(alpha), Some((scale, seed))) => Some(degrade_public(&alpha, scale, seed)?),
        (None, Some(_)) => {
            return Err(config_err("sweep.public_noise: requires a public prior to perturb"))
        }
        (alpha, None) => alpha,
    };
    let word_cap = config.word_cap(raw.num_users());
    let total_cap = config.total_cap(raw.num_users());
    let db = raw.apply_contribution_limits(word_cap, total_cap);
    Ok(ExperimentData { vocab, raw, db, alpha, word_cap, total_cap })
}

fn bayesian_params(config: &ExperimentConfig, epsilon: f64, word_cap: u64) -> BayesianParams {
    BayesianParams {
        epsilon,
        delta: config.mechanism.delta,
        s: config.mechanism.s.unwrap_or(1.0),
        word_cap,
        rho: config.mechanism.rho.unwrap_or(0.5),
    }
}

fn tuning_grid(config: &ExperimentConfig) -> Result<HyperGrid> {
    let tune = config.tune.as_ref();
    let s_axis = tune.and_then(|t| t.s_grid.clone());
    let rho_axis = tune.and_then(|t| t.rho_grid.clone());
    if s_axis.is_none() && rho_axis.is_none() {
        return Ok(HyperGrid::default_grid());
    }
    HyperGrid::from_axes(
        &s_axis.unwrap_or_else(|| DEFAULT_S_AXIS.to_vec()),
        &rho_axis.unwrap_or_else(|| DEFAULT_RHO_AXIS.to_vec()),
    )
}

fn run_tuned(
    config: &ExperimentConfig,
    data: &ExperimentData,
    epsilon: f64,
    seed: u64,
) -> Result<TuningOutcome> {
    let (epsilon_tuning, epsilon_release) = config.tuning_split(epsilon);
    let mut params =
        EndToEndParams::new(epsilon_tuning, epsilon_release, config.mechanism.delta, data.word_cap);
    if let Some(tune) = &config.tune {
        params.split_fraction = tune.split_fraction;
        params.validation_clip_cap = tune.validation_word_cap;
    }
    params.method = config.mechanism.sensitivity.into();
    end_to_end_dp(&data.db, data.alpha()?, &tuning_grid(config)?, &params, seed)
}

/// Runs one mechanism at one epsilon; tuned runs also return the full outcome.
pub fn run_mechanism(
    config: &ExperimentConfig,
    data: &ExperimentData,
    choice: MechanismChoice,
    epsilon: Option<f64>,
    seed: u64,
) -> Result<(ReleasedDistribution, Option<TuningOutcome>)> {
    let need_epsilon = || {
        epsilon.ok_or_else(|| config_err(format!("mechanism.epsilon: required for \"{choice}\"")))
    };
    match choice {
        MechanismChoice::Bayesian => {
            let params = bayesian_params(config, need_epsilon()?, data.word_cap);
            let release = bayesian_dp(
                &data.db,
                data.alpha()?,
                &params,
                config.mechanism.sensitivity.into(),
                seed,
            )?;
            Ok((release, None))
        }
        MechanismChoice::BayesianTuned => {
            let outcome = run_tuned(config, data, need_epsilon()?, seed)?;
            Ok((outcome.release.clone(), Some(outcome)))
        }
        MechanismChoice::Laplace => {
            Ok((laplace_baseline(&data.db, data.total_cap, need_epsilon()?, seed)?, None))
        }
        MechanismChoice::ModifiedLaplace => Ok((
            modified_laplace_baseline(&data.db, data.alpha()?, need_epsilon()?, seed)?,
            None,
        )),
        MechanismChoice::KAnonymity => {
            let k = config
                .mechanism
                .k
                .ok_or_else(|| config_err("mechanism.k: required for kind = \"k-anonymity\""))?;
            Ok((k_anonymize(&data.db, k)?, None))
        }
    }
}

/// File name carrying the exact spent budget, e.g.
/// `release-bayesian-eps0.1-delta0.00001.json`.
pub fn release_file_name(release: &ReleasedDistribution) -> String {
    format!(
        "release-{}-eps{}-delta{}.json",
        release.mechanism, release.epsilon_spent, release.delta
    )
}

fn write_release(path: &Path, release: &ReleasedDistribution) -> Result<()> {
    let file = fs::File::create(path)?;
    release.write_json(file)
}

/// One metrics row; serialized as `mechanism,epsilon,delta,seed,metric,value`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub mechanism: String,
    pub epsilon: f64,
    pub delta: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        writer.serialize(row).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_err(err: csv::Error) -> Error {
    match err.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("csv error: {other:?}")),
    }
}

/// Provenance record written beside every run's artifacts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub root_seed: u64,
    pub duration_secs: f64,
    /// File names under the output directory, in creation order.
    pub artifacts: Vec<String>,
    pub ledger: PrivacyLedger,
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Error::Parse(format!("manifest serialization: {e}")))?;
    bytes.push(b'\n');
    fs::write(dir.join("manifest.json"), bytes)?;
    Ok(())
}

fn write_json_artifact<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Parse(format!("json serialization: {e}")))?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn single_entry_ledger(release: &ReleasedDistribution) -> PrivacyLedger {
    let mut ledger = PrivacyLedger::new();
    ledger.push(release.mechanism.to_string(), release.epsilon_spent, release.delta);
    ledger
}

/// Heldout sentences for perplexity: non-empty lines of the configured file.
fn read_heldout(loaded: &LoadedConfig, path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(loaded.resolve(path))?;
    let sentences: Vec<String> =
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if sentences.is_empty() {
        return Err(Error::EmptyInput("held-out corpus"));
    }
    Ok(sentences)
}

/// Scores one release against the run's data; epsilon and delta in every row
/// come from the release itself, never from the config.
fn eval_rows(
    loaded: &LoadedConfig,
    data: &ExperimentData,
    release: &ReleasedDistribution,
) -> Result<Vec<MetricRow>> {
    let config = &loaded.config;
    let eval = match &config.eval {
        Some(eval) => eval,
        None => return Ok(Vec::new()),
    };
    if release.theta.len() != data.vocab.len() {
        return Err(Error::DimensionMismatch {
            expected: data.vocab.len(),
            actual: release.theta.len(),
        });
    }
    let row = |metric: &str, value: f64| MetricRow {
        mechanism: release.mechanism.to_string(),
        epsilon: release.epsilon_spent,
        delta: release.delta,
        seed: config.root_seed,
        metric: metric.to_string(),
        value,
    };
    let mut rows = Vec::new();
    if eval.kl {
        let reference = data.reference()?;
        rows.push(row("kl", kl_divergence(reference.values(), release.theta.values())?));
    }
    if eval.perplexity {
        let heldout = eval
            .heldout
            .as_ref()
            .ok_or_else(|| config_err("eval.heldout: required when eval.perplexity is enabled"))?;
        let sentences = read_heldout(loaded, heldout)?;
        let covered = filter_covered(&data.vocab, &sentences, None);
        let value = conditional_perplexity(release.theta.values(), &data.vocab, &covered)?;
        rows.push(row("perplexity", value));
    }
    Ok(rows)
}

fn prepared_output_dir(loaded: &LoadedConfig) -> Result<PathBuf> {
    let dir = loaded.output_dir();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// `release` / `tune`: one mechanism, one release file, optional eval rows.
pub fn cmd_release(loaded: &LoadedConfig, command: &str) -> Result<Vec<String>> {
    let started = Instant::now();
    let config = &loaded.config;
    if command == "tune" && config.mechanism.kind != MechanismChoice::BayesianTuned {
        return Err(config_err(
            "mechanism.kind: the tune command requires kind = \"bayesian-tuned\"",
        ));
    }
    let data = load_data(loaded, config.root_seed, None, None)?;
    let (release, outcome) = run_mechanism(
        config,
        &data,
        config.mechanism.kind,
        config.mechanism.epsilon,
        child_seed(config.root_seed, "release", 0),
    )?;
    let out_dir = prepared_output_dir(loaded)?;
    let release_name = release_file_name(&release);
    write_release(&out_dir.join(&release_name), &release)?;
    let mut artifacts = vec![release_name];
    if let Some(outcome) = &outcome {
        write_json_artifact(&out_dir.join("tuning-report.json"), outcome)?;
        artifacts.push("tuning-report.json".to_string());
    }
    let rows = eval_rows(loaded, &data, &release)?;
    if !rows.is_empty() {
        write_metric_csv(&out_dir.join("eval.csv"), &rows)?;
        artifacts.push("eval.csv".to_string());
    }
    let ledger = match outcome {
        Some(outcome) => outcome.ledger,
        None => single_entry_ledger(&release),
    };
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config_sha256: loaded.sha256.clone(),
        root_seed: config.root_seed,
        duration_secs: started.elapsed().as_secs_f64(),
        artifacts: artifacts.clone(),
        ledger,
    };
    write_manifest(&out_dir, &manifest)?;
    artifacts.push("manifest.json".to_string());
    Ok(artifacts)
}

/// `eval`: score existing release files against the configured data.
pub fn cmd_eval(loaded: &LoadedConfig, releases: &[PathBuf]) -> Result<Vec<String>> {
    let started = Instant::now();
    let config = &loaded.config;
    if config.eval.is_none() {
        return Err(config_err("eval: section required by the eval command"));
    }
    let data = load_data(loaded, config.root_seed, None, None)?;
    let mut rows = Vec::new();
    for path in releases {
        let resolved = loaded.resolve(path);
        let file = fs::File::open(&resolved)?;
        let release = ReleasedDistribution::read_json(file)?;
        rows.extend(eval_rows(loaded, &data, &release)?);
    }
    let out_dir = prepared_output_dir(loaded)?;
    write_metric_csv(&out_dir.join("eval.csv"), &rows)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: "eval".to_string(),
        config_sha256: loaded.sha256.clone(),
        root_seed: config.root_seed,
        duration_secs: started.elapsed().as_secs_f64(),
        artifacts: vec!["eval.csv".to_string()],
        ledger: PrivacyLedger::new(),
    };
    write_manifest(&out_dir, &manifest)?;
    Ok(vec!["eval.csv".to_string(), "manifest.json".to_string()])
}

type MechanismFn = Box<dyn Fn(&CountsDatabase, f64, u64) -> Result<ProbDistribution> + Sync>;

fn attack_mechanism(
    config: &ExperimentConfig,
    data: &ExperimentData,
    choice: MechanismChoice,
) -> Result<(MechanismFn, f64)> {
    let word_cap = data.word_cap;
    let total_cap = data.total_cap;
    let method = config.mechanism.sensitivity.into();
    match choice {
        MechanismChoice::Bayesian => {
            let alpha = data.alpha()?.clone();
            let template = bayesian_params(config, 1.0, word_cap);
            let delta = template.delta;
            let f: MechanismFn = Box::new(move |db, epsilon, seed| {
                let params = BayesianParams { epsilon, ..template };
                bayesian_dp(db, &alpha, &params, method, seed).map(|r| r.theta)
            });
            Ok((f, delta))
        }
        MechanismChoice::Laplace => {
            let f: MechanismFn = Box::new(move |db, epsilon, seed| {
                laplace_baseline(db, total_cap, epsilon, seed).map(|r| r.theta)
            });
            Ok((f, 0.0))
        }
        MechanismChoice::ModifiedLaplace => {
            let alpha = data.alpha()?.clone();
            let f: MechanismFn = Box::new(move |db, epsilon, seed| {
                modified_laplace_baseline(db, &alpha, epsilon, seed).map(|r| r.theta)
            });
            Ok((f, 0.0))
        }
        MechanismChoice::KAnonymity | MechanismChoice::BayesianTuned => Err(config_err(format!(
            "attack.mechanisms: \"{choice}\" does not support an epsilon sweep"
        ))),
    }
}

/// `attack`: membership-inference success rates across epsilons.
pub fn cmd_attack(loaded: &LoadedConfig) -> Result<Vec<String>> {
    let started = Instant::now();
    let config = &loaded.config;
    let attack = config
        .attack
        .as_ref()
        .ok_or_else(|| config_err("attack: section required by the attack command"))?;
    let data = load_data(loaded, config.root_seed, None, None)?;
    let mut rows = Vec::new();
    let mut reports: Vec<AttackReport> = Vec::new();
    for (index, choice) in attack.mechanisms.iter().enumerate() {
        let label = choice.to_string();
        let (mechanism, delta) = attack_mechanism(config, &data, *choice)?;
        let report = membership_inference(
            &data.db,
            &attack.epsilons,
            attack.trials,
            mechanism,
            &label,
            child_seed(config.root_seed, "attack", index as u64),
        )?;
        for point in &report.points {
            rows.push(MetricRow {
                mechanism: label.clone(),
                epsilon: point.epsilon,
                delta,
                seed: config.root_seed,
                metric: "attack-success-rate".to_string(),
                value: point.success_rate,
            });
        }
        reports.push(report);
    }
    let out_dir = prepared_output_dir(loaded)?;
    write_metric_csv(&out_dir.join("attack.csv"), &rows)?;
    write_json_artifact(&out_dir.join("attack-report.json"), &reports)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: "attack".to_string(),
        config_sha256: loaded.sha256.clone(),
        root_seed: config.root_seed,
        duration_secs: started.elapsed().as_secs_f64(),
        artifacts: vec!["attack.csv".to_string(), "attack-report.json".to_string()],
        ledger: PrivacyLedger::new(),
    };
    write_manifest(&out_dir, &manifest)?;
    Ok(vec!["attack.csv".to_string(), "attack-report.json".to_string(), "manifest.json".to_string()])
}

/// Points of the sweep's optional extra axis.
enum SweepAxis {
    Plain,
    Users(Vec<usize>),
    PublicNoise(Vec<f64>),
}

impl SweepAxis {
    fn points(&self) -> Vec<(Option<String>, Option<usize>, Option<(usize, f64)>)> {
        match self {
            SweepAxis::Plain => vec![(None, None, None)],
            SweepAxis::Users(counts) => counts
                .iter()
                .map(|n| (Some(format!("users={n}")), Some(*n), None))
                .collect(),
            SweepAxis::PublicNoise(scales) => scales
                .iter()
                .enumerate()
                .map(|(i, s)| (Some(format!("public_noise={s}")), None, Some((i, *s))))
                .collect(),
        }
    }
}

/// `sweep`: one KL row per (mechanism, epsilon, seed) and axis point.
pub fn cmd_sweep(loaded: &LoadedConfig) -> Result<Vec<String>> {
    let started = Instant::now();
    let config = &loaded.config;
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| config_err("sweep: section required by the sweep command"))?;
    let axis = match (&sweep.users, &sweep.public_noise) {
        (Some(users), None) => SweepAxis::Users(users.clone()),
        (None, Some(scales)) => SweepAxis::PublicNoise(scales.clone()),
        (None, None) => SweepAxis::Plain,
        (Some(_), Some(_)) => {
            return Err(config_err(
                "sweep.users and sweep.public_noise: at most one extra axis per sweep",
            ))
        }
    };
    let mut rows = Vec::new();
    for seed_index in 0..sweep.seeds {
        // Each repetition gets its own root; the CSV's seed column records it.
        let run_seed = config.root_seed.wrapping_add(seed_index);
        let mut point = 0u64;
        for (axis_label, users_override, noise) in axis.points() {
            let prior_noise =
                noise.map(|(i, scale)| (scale, child_seed(run_seed, "public-noise", i as u64)));
            let data = load_data(loaded, run_seed, users_override, prior_noise)?;
            let reference = data.reference()?;
            let metric = match &axis_label {
                Some(label) => format!("kl:{label}"),
                None => "kl".to_string(),
            };
            for choice in &sweep.mechanisms {
                for epsilon in &sweep.epsilons {
                    let seed = child_seed(run_seed, "sweep-release", point);
                    point += 1;
                    let (release, _) =
                        run_mechanism(config, &data, *choice, Some(*epsilon), seed)?;
                    rows.push(MetricRow {
                        mechanism: release.mechanism.to_string(),
                        epsilon: release.epsilon_spent,
                        delta: release.delta,
                        seed: run_seed,
                        metric: metric.clone(),
                        value: kl_divergence(reference.values(), release.theta.values())?,
                    });
                }
            }
        }
    }
    let out_dir = prepared_output_dir(loaded)?;
    write_metric_csv(&out_dir.join("sweep.csv"), &rows)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: "sweep".to_string(),
        config_sha256: loaded.sha256.clone(),
        root_seed: config.root_seed,
        duration_secs: started.elapsed().as_secs_f64(),
        artifacts: vec!["sweep.csv".to_string()],
        ledger: PrivacyLedger::new(),
    };
    write_manifest(&out_dir, &manifest)?;
    Ok(vec!["sweep.csv".to_string(), "manifest.json".to_string()])
}

/// `ingest`: turn `user<TAB>sentence` lines into a counts TSV.
pub fn cmd_ingest(input: &Path, vocabulary: &Path, output: &Path) -> Result<()> {
    let vocab = Arc::new(Vocabulary::read_path(vocabulary)?);
    let text = fs::read_to_string(input)?;
    let mut per_user: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (user, sentence) = line.split_once('\t').ok_or_else(|| {
            Error::Parse(format!("line {}: expected \"user<TAB>sentence\"", lineno + 1))
        })?;
        let user = user.trim();
        if user.is_empty() {
            return Err(Error::Parse(format!("line {}: empty user id", lineno + 1)));
        }
        let joined = per_user.entry(user.to_string()).or_default();
        joined.push_str(sentence);
        joined.push('\n');
    }
    if per_user.is_empty() {
        return Err(Error::EmptyInput("ingest input"));
    }
    let users: Vec<UserContribution> = per_user
        .iter()
        .map(|(id, text)| UserContribution::from_text(id, text, &vocab))
        .collect();
    let db = CountsDatabase::new(Arc::clone(&vocab), users)?;
    db.write_tsv_path(output)?;
    println!("wrote counts for {} users to {}", db.num_users(), output.display());
    Ok(())
}

/// `vocab`: build a frequency-ordered vocabulary from a corpus file.
pub fn cmd_vocab(input: &Path, order: usize, max_size: Option<usize>, output: &Path) -> Result<()> {
    if order == 0 {
        return Err(config_err("--order: must be positive"));
    }
    if max_size == Some(0) {
        return Err(config_err("--max-size: must be positive"));
    }
    let text = fs::read_to_string(input)?;
    let full = Vocabulary::from_corpus(order, &text)?;
    let vocab = match max_size {
        Some(limit) if limit < full.len() => {
            Vocabulary::new(order, full.entries()[..limit].to_vec())?
        }
        _ => full,
    };
    vocab.write_path(output)?;
    println!("wrote {} entries to {}", vocab.len(), output.display());
    Ok(())
}
