//! Command-line front end for the parallel-training simulator and the
//! recommendation trainer.
//!
//! Commands: `simulate`, `calibrate`, `train`, `report`. Every command reads
//! a TOML [`ExperimentConfig`] (except `report`) and writes CSV/Markdown
//! artifacts into the output directory.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    cmd_calibrate, cmd_report, cmd_simulate, cmd_train, fit_costs, load_costs, simulate_rows,
    train_variants, FitOutcome, SimRow, VariantOutcome,
};
pub use config::{ExperimentConfig, Format};

/// Failure split by exit code: bad input (1) versus failure while running (2).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<parsim_core::Error> for CliError {
    fn from(e: parsim_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "parsim", version, about = "Simulate and compare parallel training strategies")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write only this report format; overrides `output.formats`.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate every `[[run]]` and write report and timeline files.
    Simulate {
        /// Fitted costs file replacing the config's `[costs]`.
        #[arg(long)]
        costs: Option<PathBuf>,
    },
    /// Fit cost parameters to the runs' target throughputs.
    Calibrate {
        /// Starting costs file replacing the config's `[costs]`.
        #[arg(long)]
        costs: Option<PathBuf>,
    },
    /// Train and evaluate every `[[trainer.variant]]`.
    Train {
        /// Evaluate previously saved models instead of training.
        #[arg(long)]
        eval_only: bool,
    },
    /// Combine the artifacts of earlier runs into one Markdown report.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

/// Output directory and formats after applying command-line overrides.
#[derive(Debug, Clone)]
pub struct OutputOptions {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
}

impl OutputOptions {
    pub fn resolve(cli: &Cli, cfg: &ExperimentConfig) -> Self {
        Self {
            dir: cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone()),
            formats: match cli.format {
                Some(f) => vec![f],
                None => cfg.output.formats.clone(),
            },
        }
    }

    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    ExperimentConfig::load(path)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate { costs } => {
            let cfg = load_config(cli)?;
            let out = OutputOptions::resolve(cli, &cfg);
            cmd_simulate(&cfg, costs.as_deref(), &out).map(|_| ())
        }
        Command::Calibrate { costs } => {
            let cfg = load_config(cli)?;
            let out = OutputOptions::resolve(cli, &cfg);
            cmd_calibrate(&cfg, costs.as_deref(), &out).map(|_| ())
        }
        Command::Train { eval_only } => {
            let cfg = load_config(cli)?;
            let out = OutputOptions::resolve(cli, &cfg);
            cmd_train(&cfg, cli.seed, *eval_only, &out).map(|_| ())
        }
        Command::Report { dirs } => {
            let text = cmd_report(dirs)?;
            match &cli.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join("combined_report.md"), text)?;
                }
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}
