// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use error::CliError;

/// Dissipaton equation-of-motion runs for a system coupled to a Drude bath.
#[derive(Parser, Debug)]
#[command(name = "deom", version)]
struct Cli {
    /// Run configuration (TOML). Defaults to the shipped spin-boson benchmark.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set bath.temperature=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory (overrides `output.dir`).
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the shipped benchmark configuration.
    Config,
    /// Bath decomposition: mode table and fidelity against quadrature.
    Decompose,
    /// Real-time propagation with observable trajectories.
    Propagate {
        /// Initial state, overriding `propagate.init`.
        #[arg(long)]
        init: Option<String>,
    },
    /// Stationary hierarchy by self-consistent iteration.
    Steady,
    /// Imaginary-time propagation to the hybridization free energy.
    Ideom,
    /// Free energy by integrating over the coupling strength.
    FreeEnergy,
    /// Forward work distribution and the Jarzynski check.
    Work,
    /// Forward and backward work distributions and the Crooks check.
    Crooks,
    /// Stationary two-time correlation function.
    Correlate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Config => "config",
            Command::Decompose => "decompose",
            Command::Propagate { .. } => "propagate",
            Command::Steady => "steady",
            Command::Ideom => "ideom",
            Command::FreeEnergy => "free-energy",
            Command::Work => "work",
            Command::Crooks => "crooks",
            Command::Correlate => "correlate",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Config = cli.command {
        print!("{}", config::DEFAULT_CONFIG);
        return Ok(());
    }
    let mut overrides = cli.overrides.clone();
    if let Command::Propagate { init: Some(init) } = &cli.command {
        overrides.push(format!("propagate.init={}", toml_string(init)));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("output.dir={}", toml_string(&out.to_string_lossy())));
    }
    // everything is validated before the output directory is touched
    let cfg = config::load(cli.config.as_deref(), &overrides)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let dir = PathBuf::from(&cfg.output.dir);
    let outcome = match &cli.command {
        Command::Config => unreachable!(),
        Command::Decompose => commands::decompose(&cfg)?,
        Command::Propagate { .. } => commands::run_propagate(&cfg, &dir)?,
        Command::Steady => commands::run_steady(&cfg)?,
        Command::Ideom => commands::run_ideom(&cfg)?,
        Command::FreeEnergy => commands::run_free_energy(&cfg)?,
        Command::Work => commands::run_work(&cfg)?,
        Command::Crooks => commands::run_crooks(&cfg, &dir)?,
        Command::Correlate => commands::run_correlate(&cfg, &dir)?,
    };
    output::commit(&dir, cli.command.name(), &cfg, &outcome)?;
    for a in &outcome.artifacts {
        eprintln!("wrote {}", dir.join(&a.name).display());
    }
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("deom: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
