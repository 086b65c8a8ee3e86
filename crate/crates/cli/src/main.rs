mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hamshape::basis::Mode;

use commands::{CmdResult, Kind, Tag};
use config::RunConfig;

/// Energy-shaping exoskeleton controller toolkit.
#[derive(Debug, Parser)]
#[command(name = "hamshape", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Basis mode.
    #[arg(long, global = true, value_parser = ["wop", "phi"])]
    mode: Option<String>,
    /// L1 regularization weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for generated fixtures.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit shaping coefficients on all subjects.
    Fit,
    /// Leave-one-subject-out cross-validation for both modes.
    Cv {
        /// Comma-separated regularization weights to sweep.
        #[arg(long, value_delimiter = ',')]
        lambda_sweep: Vec<f64>,
    },
    /// Closed-loop stance simulation with energy and matching audits.
    Simulate {
        /// Shaping spec or fit result JSON.
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
    },
    /// Muscle effort from EMG recordings.
    Emg,
    /// Compare a CV table with the reference values.
    Report,
}

fn build_config(cli: &Cli) -> CmdResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).tag(Kind::Config)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &cli.mode {
        cfg.mode = m.parse::<Mode>().map_err(anyhow::Error::msg).tag(Kind::Config)?;
    }
    if let Some(l) = cli.lambda {
        cfg.fit.weights.lambda = l;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().tag(Kind::Config)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> CmdResult<()> {
    let cfg = build_config(cli)?;
    log::debug!("configuration: {cfg:?}");
    match &cli.command {
        Command::Fit => commands::cmd_fit(&cfg),
        Command::Cv { lambda_sweep } => commands::cmd_cv(&cfg, lambda_sweep),
        Command::Simulate { spec } => commands::cmd_simulate(&cfg, spec.as_ref()),
        Command::Emg => commands::cmd_emg(&cfg),
        Command::Report => commands::cmd_report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HAMSHAPE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hamshape: {f}");
            ExitCode::from(f.kind.exit_code() as u8)
        }
    }
}
