//! Experiment driver for `advquery`: config files, subcommands, checkpoints and reports.
//!
//! Exit codes: 0 success, 2 input error, 3 runtime abort.

pub mod commands;
pub mod config;
pub mod experiment;
mod output;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_attack, cmd_compare, cmd_eval, cmd_gen_data, cmd_train};
pub use config::{ConfigError, Origin, RawConfig};
pub use experiment::ExperimentConfig;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Config { path: String, source: ConfigError },
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Input(_) => EXIT_INPUT,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<advquery::Error> for CliError {
    fn from(e: advquery::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "advquery",
    version,
    about = "Adversarially robust few-shot meta-learning experiments"
)]
pub struct Cli {
    /// Worker threads (default: all cores). 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config file.
    pub config: PathBuf,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Override the global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: the config's `output` key).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train (or transfer-train) a model.
    Train(Common),
    /// Evaluate a checkpoint on held-out classes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model name in the metrics files (default: checkpoint file stem).
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate the config's `[run]` entries on paired episodes.
    Compare(Common),
    /// Robustness report under PGD, PGD with restarts, MI-FGSM and DeepFool.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source checkpoint for a transfer attack (overrides `[suite] source`).
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset as an FSDS file.
    GenData(Common),
}

/// Reads and validates the config named in `common`, applying its overrides.
pub fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let path = common.config.display().to_string();
    let text = std::fs::read_to_string(&common.config).map_err(|e| CliError::Input(format!("{path}: {e}")))?;
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let base = common.config.parent().unwrap_or(Path::new("")).to_path_buf();
    let cfg =
        ExperimentConfig::from_text(&text, &overrides, &base).map_err(|source| CliError::Config { path, source })?;
    let out = common.output.clone().unwrap_or_else(|| cfg.output.clone());
    Ok((cfg, out))
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads;
    let go = move || -> Result<(), CliError> {
        match cli.command {
            Command::Train(c) => {
                let (cfg, out) = load_config(&c)?;
                cmd_train(&cfg, &out, threads).map(|_| ())
            }
            Command::Eval {
                common,
                checkpoint,
                name,
            } => {
                let (cfg, out) = load_config(&common)?;
                let name = name.unwrap_or_else(|| {
                    checkpoint
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default()
                });
                cmd_eval(&cfg, &checkpoint, &name, &out, threads).map(|_| ())
            }
            Command::Compare(c) => {
                let (cfg, out) = load_config(&c)?;
                cmd_compare(&cfg, &out, threads).map(|_| ())
            }
            Command::Attack {
                common,
                checkpoint,
                source,
            } => {
                let (cfg, out) = load_config(&common)?;
                let source = source.or_else(|| cfg.attack_source.clone());
                cmd_attack(&cfg, &checkpoint, source.as_deref(), &out, threads).map(|_| ())
            }
            Command::GenData(c) => {
                let (cfg, out) = load_config(&c)?;
                cmd_gen_data(&cfg, &out, threads).map(|_| ())
            }
        }
    };
    match threads {
        None => go(),
        Some(0) => Err(CliError::Input("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?
            .install(go),
    }
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
