//! Command-line pipeline around `lfi_core`: generate a dataset, train a
//! model, evaluate it against the plant, and tabulate the results.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use lfi_core::training::Mode;
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod eval;

pub use config::{DataSection, EvalSection, GridSpec, Paths, RunConfig};

/// Failure classes, one per exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Training(_) => 4,
            CliError::Estimation(_) => 5,
        }
    }

    /// Maps a core error to its exit class; anything unrecognised goes to
    /// `fallback`.
    pub fn from_core(e: lfi_core::Error, fallback: fn(String) -> CliError) -> CliError {
        use lfi_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. } | E::Format { .. } => CliError::Io(msg),
            E::NonConvergence(_) => CliError::Training(msg),
            E::RankDeficient { .. } | E::InsufficientSamples { .. } | E::Unbounded => CliError::Estimation(msg),
            E::Cutoff { .. } => CliError::Config(msg),
            _ => fallback(msg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Lfi,
    Vanilla,
    Narx,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Lfi => Mode::Lfi,
            ModeArg::Vanilla => Mode::Vanilla,
            ModeArg::Narx => Mode::Narx,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lfi-node", version, about = "Neural ODE identification with latent-feature Jacobian matching")]
pub struct Cli {
    /// JSON run config; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.iterations=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Print the fully resolved config and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the input sweep and write the dataset.
    Generate,
    /// Train one model on the dataset.
    Train {
        #[arg(long, value_enum, default_value = "lfi")]
        mode: ModeArg,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare a trained model with the plant on the test inputs.
    Eval {
        #[arg(long, value_enum, default_value = "lfi")]
        mode: ModeArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Model file; defaults to the one `train` writes for this mode and seed.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Reference Jacobian of a single trajectory CSV.
    Jacobian {
        trajectory: PathBuf,
        /// Zero-phase low-pass the trajectory first.
        #[arg(long)]
        filter: bool,
        /// Filter cutoff; defaults to `data.cutoff_hz`.
        #[arg(long)]
        cutoff: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Noise error bound of the reference Jacobian of a trajectory CSV.
    Bound {
        trajectory: PathBuf,
        #[arg(long)]
        sigma_x: f64,
        /// Norm of the true Jacobian; defaults to the spectral norm of J_ref.
        #[arg(long)]
        jstar_norm: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate every evaluation found in the run directory.
    Report,
}

/// Resolves the config and runs one subcommand. Returns the text for stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let mut overrides = cli.overrides.clone();
    match &cli.command {
        Command::Train { seed: Some(s), .. } | Command::Eval { seed: Some(s), .. } => {
            overrides.push(format!("train.seed={s}"));
        }
        _ => {}
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    if cli.print_config {
        return Ok(serde_json::to_string_pretty(&cfg).expect("config serializes"));
    }
    match &cli.command {
        Command::Generate => commands::cmd_generate(&cfg).map(|s| s.to_string()),
        Command::Train { mode, .. } => commands::cmd_train(&cfg, (*mode).into()).map(|s| s.to_string()),
        Command::Eval { mode, model, .. } => {
            let report = commands::cmd_eval(&cfg, (*mode).into(), model.as_deref())?;
            Ok(report.summary())
        }
        Command::Jacobian { trajectory, filter, cutoff, out } => {
            let cutoff = if *filter {
                Some(cutoff.or(cfg.data.cutoff_hz).ok_or_else(|| {
                    CliError::Config("--filter needs --cutoff or data.cutoff_hz".into())
                })?)
            } else {
                None
            };
            let v = commands::cmd_jacobian(&cfg, trajectory, cutoff)?;
            emit(&v, out.as_deref())
        }
        Command::Bound { trajectory, sigma_x, jstar_norm, out } => {
            let v = commands::cmd_bound(&cfg, trajectory, *sigma_x, *jstar_norm)?;
            emit(&v, out.as_deref())
        }
        Command::Report => {
            let report = commands::cmd_report(&cfg)?;
            Ok(report.to_csv().trim_end().to_string())
        }
    }
}

fn emit<T: serde::Serialize>(value: &T, out: Option<&std::path::Path>) -> Result<String, CliError> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    if let Some(path) = out {
        commands::write_text(path, &format!("{text}\n"))?;
    }
    Ok(text)
}
