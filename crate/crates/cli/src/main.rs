//! `regnoise` command-line driver.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Name of the environment variable holding the worker count.
pub const WORKERS_ENV: &str = "REGNOISE_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] regnoise::Error),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use regnoise::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Resource { .. }) => 3,
            CliError::Core(E::Parameter(_) | E::Domain(_) | E::Precondition(_) | E::Unsupported(_)) => 2,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "regnoise", version, about = "SDEs with irregular drift along fixed Brownian paths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set davie.paths=2000`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `run.out`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `run.seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve along one path with the nonlinear Young and Euler-Maruyama schemes.
    Simulate(Common),
    /// Tabulate averaged fields and fit their Holder exponents.
    Average(Common),
    /// Build a flow, check the flow property, Holder regularity, gluing and the uniqueness certificate.
    Flow(Common),
    /// Monte Carlo moment exponents against quadrature oracles.
    Davie(Common),
    /// Running-supremum moments against the Gamma growth.
    Jn(Common),
    /// Flow distances under mollification of the drift.
    Stability(Common),
    /// Two exact solutions without noise, scheme agreement with noise.
    DemoRegularization(Common),
    /// Randomized sewing instances with known limits.
    SewSelftest(Common),
}

fn configure_workers() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("{WORKERS_ENV} must be a positive integer, got `{raw}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("{WORKERS_ENV}: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> Result<bool, CliError> {
    configure_workers()?;
    let (name, common) = match &cli.command {
        Command::Simulate(c) => ("simulate", c),
        Command::Average(c) => ("average", c),
        Command::Flow(c) => ("flow", c),
        Command::Davie(c) => ("davie", c),
        Command::Jn(c) => ("jn", c),
        Command::Stability(c) => ("stability", c),
        Command::DemoRegularization(c) => ("demo-regularization", c),
        Command::SewSelftest(c) => ("sew-selftest", c),
    };
    let mut overrides = common.set.clone();
    if let Some(out) = &common.out {
        overrides.push(format!("run.out=\"{}\"", out.display().to_string().replace('\\', "\\\\").replace('"', "\\\"")));
    }
    if let Some(seed) = common.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    let config = config::load(common.config.as_deref(), &overrides)?;
    let hash = config.hash();
    let outcome = commands::dispatch(name, &config)?;
    manifest::write_run(&config.run.out, name, &config, &hash, &outcome.artifacts, &outcome.checks)?;
    for c in &outcome.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(outcome.checks.iter().all(|c| c.pass))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("regnoise: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
