use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use randprom::pipeline::{exit_code, Pipeline, PipelineConfig, Stage};

/// Reduced-order tsunami forecasting pipeline.
#[derive(Debug, Parser)]
#[command(name = "randprom", version, about)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reference simulation.
    Simulate,
    /// Sensor network, perturbation ensemble and extreme-member manifest.
    Ensemble,
    /// Proper orthogonal decomposition of the reference run.
    Pod,
    /// Prescaled Galerkin operators.
    Rom,
    /// Train the nGP corrections.
    Ngp,
    /// Hierarchical Bayesian calibration of the initial values.
    Calibrate,
    /// Posterior predictive bands at every sensor.
    Forecast,
    /// Markdown run report.
    Report,
    /// Run one stage by name, or every stage in order.
    Run {
        #[arg(long, value_name = "NAME")]
        stage: Option<String>,
    },
    /// Print the effective configuration.
    Config,
}

fn load(cli: &Cli) -> randprom::Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| randprom::Error::Config("--config PATH is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> randprom::Result<()> {
    let cfg = load(cli)?;
    let stage = match &cli.command {
        Command::Simulate => Some(Stage::Simulate),
        Command::Ensemble => Some(Stage::Ensemble),
        Command::Pod => Some(Stage::Pod),
        Command::Rom => Some(Stage::Rom),
        Command::Ngp => Some(Stage::Ngp),
        Command::Calibrate => Some(Stage::Calibrate),
        Command::Forecast => Some(Stage::Forecast),
        Command::Report => Some(Stage::Report),
        Command::Run { stage } => match stage {
            Some(name) => Some(name.parse()?),
            None => None,
        },
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            return Ok(());
        }
    };
    let mut pipeline = Pipeline::new(cfg)?;
    match stage {
        Some(s) => pipeline.run(s),
        None => pipeline.run_all(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
