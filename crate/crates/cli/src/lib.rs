//! Command-line front end: argument parsing, dispatch, and exit codes.

pub mod config;
pub mod runner;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ngram_dp_core::{Error, Result};

use config::LoadedConfig;

#[derive(Debug, Parser)]
#[command(
    name = "ngram-dp",
    version,
    about = "Differentially private n-gram distribution releases"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert `user<TAB>sentence` lines into a per-user counts TSV.
    Ingest {
        /// Text file with one `user<TAB>sentence` line per record.
        #[arg(long)]
        input: PathBuf,
        /// Vocabulary file restricting which n-grams are counted.
        #[arg(long)]
        vocabulary: PathBuf,
        /// Destination counts TSV.
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a frequency-ordered vocabulary from a corpus file.
    Vocab {
        #[arg(long)]
        input: PathBuf,
        /// n-gram order (1 = unigrams, 2 = bigrams, ...).
        #[arg(long, default_value_t = 1)]
        order: usize,
        /// Keep only this many of the most frequent entries.
        #[arg(long)]
        max_size: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the configured mechanism once and write its release artifacts.
    Release {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the private hyperparameter-tuning pipeline end to end.
    Tune {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score existing release files against the configured data.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Release JSON file to score; repeatable.
        #[arg(long = "release", required = true)]
        releases: Vec<PathBuf>,
    },
    /// Membership-inference attack sweep across epsilons.
    Attack {
        #[arg(long)]
        config: PathBuf,
    },
    /// Utility sweep across epsilons and optionally one extra axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::ZeroSupport { .. } | Error::KlUndefined { .. } | Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn announce(loaded: &LoadedConfig, artifacts: &[String]) {
    let dir = loaded.output_dir();
    for name in artifacts {
        println!("wrote {}", dir.join(name).display());
    }
}

fn run_config_command(
    path: &PathBuf,
    run: impl FnOnce(&LoadedConfig) -> Result<Vec<String>>,
) -> Result<()> {
    let loaded = config::load_config(path)?;
    let artifacts = run(&loaded)?;
    announce(&loaded, &artifacts);
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest { input, vocabulary, output } => {
            runner::cmd_ingest(&input, &vocabulary, &output)
        }
        Command::Vocab { input, order, max_size, output } => {
            runner::cmd_vocab(&input, order, max_size, &output)
        }
        Command::Release { config } => {
            run_config_command(&config, |loaded| runner::cmd_release(loaded, "release"))
        }
        Command::Tune { config } => {
            run_config_command(&config, |loaded| runner::cmd_release(loaded, "tune"))
        }
        Command::Eval { config, releases } => {
            run_config_command(&config, |loaded| runner::cmd_eval(loaded, &releases))
        }
        Command::Attack { config } => run_config_command(&config, runner::cmd_attack),
        Command::Sweep { config } => run_config_command(&config, runner::cmd_sweep),
    }
}

/// Parses and runs; returns the process exit code instead of exiting, so
/// tests can drive the full pipeline in-process.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // Usage errors are config errors (1); --help and --version are successes.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}
