//! `ptyparam`: runs simulation, reconstruction, fitting, CRLB and Monte Carlo
//! pipelines described by a TOML experiment file.

mod commands;
mod config;
mod report;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "PTYPARAM_THREADS";

#[derive(Parser)]
#[command(name = "ptyparam", version, about = "Parameter retrieval and CRLB analysis for ptychography")]
struct Cli {
    /// Worker threads (default: $PTYPARAM_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the measurements of the configured experiment.
    Simulate(RunArgs),
    /// Reconstruct the object (or spectrum) from simulated measurements.
    Reconstruct(RunArgs),
    /// Fit the scene parameters to a reconstruction.
    Fit(RunArgs),
    /// Cramér-Rao bounds, optionally swept over photon number, alpha2 or b1.
    Crlb(RunArgs),
    /// Monte Carlo campaign over the configured photon numbers.
    Montecarlo(RunArgs),
    /// Plot data and SVG charts from the CSV files of a run directory.
    Report {
        /// Run directory holding crlb.csv and/or mc.csv.
        run: PathBuf,
        /// Exit with status 4 if a Monte Carlo variance falls below its bound.
        #[arg(long)]
        check: bool,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment description (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Run directory; overrides `output` in the config.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    MissingInput(String),
    Numerical(ptyparam::Error),
    Io(String),
    CheckFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::MissingInput(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 3,
            CliError::CheckFailed(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Numerical(_) => "numerical",
            CliError::Io(_) => "io",
            CliError::CheckFailed(_) => "check_failed",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) | CliError::MissingInput(m) | CliError::Io(m) | CliError::CheckFailed(m) => m.clone(),
            CliError::Numerical(e) => e.to_string(),
        }
    }
}

impl From<ptyparam::Error> for CliError {
    fn from(e: ptyparam::Error) -> Self {
        CliError::Numerical(e)
    }
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("{THREADS_ENV}={v} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Config("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a.config, a.out.as_deref()),
        Command::Reconstruct(a) => commands::reconstruct(&a.config, a.out.as_deref()),
        Command::Fit(a) => commands::fit(&a.config, a.out.as_deref()),
        Command::Crlb(a) => commands::crlb(&a.config, a.out.as_deref()),
        Command::Montecarlo(a) => commands::montecarlo(&a.config, a.out.as_deref()),
        Command::Report { run, check } => report::report(&run, check),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": e.kind(),
                "message": e.message(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{body}");
            ExitCode::from(e.exit_code())
        }
    }
}
