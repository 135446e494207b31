//! Batch pipeline behind the `mta` binary: `simulate`, `fit`, `attribute`
//! and `report` exchange artifacts through an output directory.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{OutputFormat, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mta", version, about = "Experiment-calibrated multi-touch attribution")]
pub struct Cli {
    /// Run configuration (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; also where inputs are looked up by default.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Simulate experiments and write event logs, ground truth and lift estimates.
    Simulate,
    /// Train attribution models and fit the calibration weights.
    Fit,
    /// Score every conversion into touchpoint credits.
    Attribute,
    /// Aggregate credits into attribution shares.
    Report,
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.out.clone(), cli.format);
    match cli.command {
        Command::Simulate => commands::simulate_cmd(&cfg),
        Command::Fit => commands::fit_cmd(&cfg),
        Command::Attribute => commands::attribute_cmd(&cfg),
        Command::Report => commands::report_cmd(&cfg),
    }
}
