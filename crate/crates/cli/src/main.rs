//! `koopman-uq`: runs one experiment per invocation and writes a run
//! directory with the resolved configuration, CSV data and JSON reports.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{ExperimentConfig, Overrides};
use run::RunDir;

#[derive(Parser)]
#[command(
    name = "koopman-uq",
    version,
    about = "Koopman flow maps and density propagation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for EDMD snapshots, reductions and Monte Carlo.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo ensemble size; 0 skips the oracle.
    #[arg(long, global = true)]
    mc_samples: Option<usize>,
    /// Koopman basis order.
    #[arg(long, global = true)]
    order: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Galerkin and EDMD spectra with their pairing.
    Eigen,
    /// Point-state error of both models against the integrator.
    PropagateState,
    /// Single-leg density propagation with the Monte Carlo oracle.
    PropagatePdf,
    /// Multi-leg propagation with reductions between legs.
    Recursive,
    /// Generate and store an EDMD snapshot set.
    Snapshots,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Eigen => "eigen",
            Command::PropagateState => "propagate-state",
            Command::PropagatePdf => "propagate-pdf",
            Command::Recursive => "recursive",
            Command::Snapshots => "snapshots",
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;

/// Exit code for a failure while running a command.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<koopman_uq::Error>() {
            return if e.is_numeric() {
                EXIT_NUMERIC
            } else if matches!(e, koopman_uq::Error::Json(_)) || e.is_io() {
                EXIT_IO
            } else {
                EXIT_CONFIG
            };
        }
        if cause.is::<std::io::Error>()
            || cause.is::<csv::Error>()
            || cause.is::<serde_json::Error>()
        {
            return EXIT_IO;
        }
    }
    EXIT_NUMERIC
}

fn load(common: &Common, command: Command) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        out: common.out.clone(),
        seed: common.seed,
        mc_samples: common.mc_samples,
        order: common.order,
    });
    cfg.resolve()?;
    commands::check(command.name(), &cfg)?;
    Ok(cfg)
}

fn execute(command: Command, cfg: &ExperimentConfig, run: &mut RunDir) -> Result<()> {
    match command {
        Command::Eigen => commands::eigen(cfg, run),
        Command::PropagateState => commands::propagate_state(cfg, run),
        Command::PropagatePdf => commands::propagate_pdf(cfg, run),
        Command::Recursive => commands::recursive(cfg, run),
        Command::Snapshots => commands::snapshots(cfg, run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match load(&cli.common, cli.command) {
        Ok(c) => c,
        Err(e) => {
            log::error!("configuration: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut run = match RunDir::create(&cfg.output.dir) {
        Ok(r) => r,
        Err(e) => {
            log::error!("{e:#}");
            return ExitCode::from(EXIT_IO);
        }
    };
    let result =
        execute(cli.command, &cfg, &mut run).and_then(|()| run.commit(cli.command.name(), &cfg));
    match result {
        Ok(dir) => {
            log::info!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{} failed: {e:#}", cli.command.name());
            ExitCode::from(classify(&e))
        }
    }
}
