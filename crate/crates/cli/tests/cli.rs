//! End-to-end tests that drive the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ngram-dp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary should run")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process should exit normally")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synthetic_config(seed: u64, mechanism_block: &str, extra_sections: &str) -> String {
    format!(
        r#"root_seed = {seed}
output_dir = "out"

[data.synthetic]
vocab_size = 50
num_users = 40
tokens_per_user = 25
zipf_exponent = 1.1

[mechanism]
{mechanism_block}

{extra_sections}
"#
    )
}

fn csv_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn release_writes_expected_artifacts() {
    let dir = TempDir::new().unwrap();
    let config = synthetic_config(11, "kind = \"bayesian\"\nepsilon = 0.5", "[eval]");
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = run_in(dir.path(), &["release", "--config", "exp.toml"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));

    let release_path = dir.path().join("out/release-bayesian-eps0.5-delta0.00001.json");
    assert!(release_path.is_file(), "release file name must carry the spent budget");
    assert!(stdout_of(&out).contains("manifest.json"));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "release");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["root_seed"], 11);
    let entries = manifest["ledger"]["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0]["epsilon"], 0.5);
    assert_eq!(entries[0]["label"], "bayesian");

    let lines = csv_lines(&dir.path().join("out/eval.csv"));
    assert_eq!(lines[0], "mechanism,epsilon,delta,seed,metric,value");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("bayesian,0.5,0.00001,11,kl,"));
}

#[test]
fn releases_are_deterministic_per_seed() {
    let make = |seed: u64| {
        let dir = TempDir::new().unwrap();
        let config = synthetic_config(seed, "kind = \"bayesian\"\nepsilon = 0.5", "");
        fs::write(dir.path().join("exp.toml"), config).unwrap();
        let out = run_in(dir.path(), &["release", "--config", "exp.toml"]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
        let bytes =
            fs::read(dir.path().join("out/release-bayesian-eps0.5-delta0.00001.json")).unwrap();
        (dir, bytes)
    };
    let (_d1, first) = make(42);
    let (_d2, second) = make(42);
    let (_d3, third) = make(43);
    assert_eq!(first, second, "same config and seed must reproduce byte-identical output");
    assert_ne!(first, third, "different seeds must change the draw");
}

#[test]
fn budget_split_mismatch_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let config = synthetic_config(
        3,
        "kind = \"bayesian-tuned\"\nepsilon = 0.5",
        "[tune]\nepsilon_tuning = 0.2\nepsilon_release = 0.4",
    );
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = run_in(dir.path(), &["tune", "--config", "exp.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("does not sum"), "stderr: {}", stderr_of(&out));
}

#[test]
fn missing_epsilon_is_reported_by_field_name() {
    let dir = TempDir::new().unwrap();
    let config = synthetic_config(3, "kind = \"bayesian\"", "");
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = run_in(dir.path(), &["release", "--config", "exp.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("mechanism.epsilon"), "stderr: {}", stderr_of(&out));
}

#[test]
fn missing_counts_file_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("vocab.txt"), "alpha\nbeta\n").unwrap();
    let config = r#"root_seed = 1

[data.files]
counts = "nope.tsv"
vocabulary = "vocab.txt"

[mechanism]
kind = "laplace"
epsilon = 1.0
"#;
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = run_in(dir.path(), &["release", "--config", "exp.toml"]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr_of(&out));
}

#[test]
fn sweep_emits_one_row_per_mechanism_epsilon_seed() {
    let dir = TempDir::new().unwrap();
    let config = synthetic_config(
        20,
        "kind = \"bayesian\"\nepsilon = 0.5",
        "[sweep]\nepsilons = [0.05, 0.1, 0.2, 0.5]\nseeds = 2",
    );
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = run_in(dir.path(), &["sweep", "--config", "exp.toml"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));

    let lines = csv_lines(&dir.path().join("out/sweep.csv"));
    assert_eq!(lines[0], "mechanism,epsilon,delta,seed,metric,value");
    assert_eq!(lines.len(), 1 + 2 * 4 * 2, "one row per (mechanism, epsilon, seed)");
    let mut combos = std::collections::BTreeSet::new();
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[4], "kl");
        let value: f64 = fields[5].parse().unwrap();
        assert!(value.is_finite() && value >= 0.0);
        assert!(combos.insert((fields[0].to_string(), fields[1].to_string(), fields[3].to_string())));
    }
    for mech in ["bayesian", "laplace"] {
        for eps in ["0.05", "0.1", "0.2", "0.5"] {
            for seed in ["20", "21"] {
                assert!(combos.contains(&(mech.into(), eps.into(), seed.into())));
            }
        }
    }
}

#[test]
fn sweep_public_noise_axis_tags_the_metric() {
    let dir = TempDir::new().unwrap();
    let config = synthetic_config(
        9,
        "kind = \"bayesian\"\nepsilon = 0.5",
        "[sweep]\nepsilons = [0.2]\nmechanisms = [\"bayesian\"]\npublic_noise = [0.0, 10.0]",
    );
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = run_in(dir.path(), &["sweep", "--config", "exp.toml"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let lines = csv_lines(&dir.path().join("out/sweep.csv"));
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains("kl:public_noise=0,"));
    assert!(lines[2].contains("kl:public_noise=10,"));
}

#[test]
fn ingest_vocab_release_pipeline_runs_on_files() {
    let dir = TempDir::new().unwrap();
    let corpus = "the cat sat on the mat\nthe dog sat on the rug\nthe bird flew over the mat\n";
    fs::write(dir.path().join("corpus.txt"), corpus).unwrap();

    let out = run_in(
        dir.path(),
        &["vocab", "--input", "corpus.txt", "--order", "1", "--output", "vocab.txt"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let vocab_lines = csv_lines(&dir.path().join("vocab.txt"));
    assert_eq!(vocab_lines[0], "the", "most frequent token first");

    let raw = "u1\tthe cat sat on the mat\nu2\tthe dog sat\nu2\tthe rug\nu3\tthe bird flew over the mat\n";
    fs::write(dir.path().join("raw.tsv"), raw).unwrap();
    let out = run_in(
        dir.path(),
        &[
            "ingest",
            "--input",
            "raw.tsv",
            "--vocabulary",
            "vocab.txt",
            "--output",
            "counts.tsv",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let counts = fs::read_to_string(dir.path().join("counts.tsv")).unwrap();
    assert!(counts.lines().all(|l| l.split('\t').count() == 3));
    assert!(counts.contains("u2\tthe\t2"), "u2's two lines must merge:\n{counts}");

    fs::write(dir.path().join("heldout.txt"), "the cat\nthe dog\nthe mat\n").unwrap();
    let config = r#"root_seed = 5

[data.files]
counts = "counts.tsv"
vocabulary = "vocab.txt"
public_corpus = "corpus.txt"

[mechanism]
kind = "bayesian"
epsilon = 1.0
word_cap = 3
total_cap = 10

[eval]
perplexity = true
heldout = "heldout.txt"
"#;
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = run_in(dir.path(), &["release", "--config", "exp.toml"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let lines = csv_lines(&dir.path().join("out/eval.csv"));
    assert_eq!(lines.len(), 3, "kl and perplexity rows expected: {lines:?}");
    assert!(lines[1].contains(",kl,"));
    assert!(lines[2].contains(",perplexity,"));
}

#[test]
fn vocab_max_size_keeps_most_frequent_entries() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("corpus.txt"), "a a a b b c d\n").unwrap();
    let out = run_in(
        dir.path(),
        &[
            "vocab",
            "--input",
            "corpus.txt",
            "--max-size",
            "2",
            "--output",
            "vocab.txt",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    assert_eq!(csv_lines(&dir.path().join("vocab.txt")), vec!["a", "b"]);
}

#[test]
fn tune_requires_the_tuned_mechanism_kind() {
    let dir = TempDir::new().unwrap();
    let config = synthetic_config(3, "kind = \"bayesian\"\nepsilon = 0.5", "");
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = run_in(dir.path(), &["tune", "--config", "exp.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("bayesian-tuned"), "stderr: {}", stderr_of(&out));
}

#[test]
fn tune_writes_report_and_two_entry_ledger() {
    let dir = TempDir::new().unwrap();
    let config = synthetic_config(
        17,
        "kind = \"bayesian-tuned\"\nepsilon = 0.5",
        "[tune]\nepsilon_tuning = 0.2\nepsilon_release = 0.3\ns_grid = [0.1, 1.0]\nrho_grid = [0.3, 0.7]",
    );
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = run_in(dir.path(), &["tune", "--config", "exp.toml"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));

    assert!(dir
        .path()
        .join("out/release-bayesian-tuned-eps0.5-delta0.00001.json")
        .is_file());
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("out/tuning-report.json")).unwrap(),
    )
    .unwrap();
    let candidates = report["candidates"].as_array().unwrap();
    assert_eq!(candidates.len(), 4);
    let selected = report["selected"].as_u64().unwrap() as usize;
    assert!(selected < candidates.len());

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/manifest.json")).unwrap())
            .unwrap();
    let entries = manifest["ledger"]["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    let total: f64 = entries.iter().map(|e| e["epsilon"].as_f64().unwrap()).sum();
    assert!((total - 0.5).abs() < 1e-12);
}

#[test]
fn eval_command_reports_budget_from_the_release_file() {
    let dir = TempDir::new().unwrap();
    let config = synthetic_config(29, "kind = \"laplace\"\nepsilon = 0.25", "[eval]");
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = run_in(dir.path(), &["release", "--config", "exp.toml"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));

    let out = run_in(
        dir.path(),
        &[
            "eval",
            "--config",
            "exp.toml",
            "--release",
            "out/release-laplace-eps0.25-delta0.json",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let lines = csv_lines(&dir.path().join("out/eval.csv"));
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("laplace,0.25,0.0,29,kl,"), "row: {}", lines[1]);
}

#[test]
fn attack_reports_success_rates_per_epsilon() {
    let dir = TempDir::new().unwrap();
    let config = format!(
        r#"root_seed = 31
output_dir = "out"

[data.synthetic]
vocab_size = 30
num_users = 25
tokens_per_user = 15

[mechanism]
kind = "bayesian"
epsilon = 0.5

[attack]
epsilons = [0.2, 5.0]
trials = 40
"#
    );
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = run_in(dir.path(), &["attack", "--config", "exp.toml"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));

    let lines = csv_lines(&dir.path().join("out/attack.csv"));
    assert_eq!(lines.len(), 1 + 2 * 2, "two mechanisms at two epsilons");
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[4], "attack-success-rate");
        let rate: f64 = fields[5].parse().unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("out/attack-report.json")).unwrap(),
    )
    .unwrap();
    assert!(!report[0]["target_user"].as_str().unwrap().is_empty());
}

#[test]
fn k_anonymity_release_names_zero_budget()  {
    let dir = TempDir::new().unwrap();
    let config = synthetic_config(7, "kind = \"k-anonymity\"\nk = 3", "");
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = run_in(dir.path(), &["release", "--config", "exp.toml"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    assert!(dir.path().join("out/release-k-anonymity-eps0-delta0.json").is_file());
}
