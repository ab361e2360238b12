//! Command-line driver: kernel tables, closed-loop simulations, resolvent
//! sweeps, the acceptance suite and parameter sweeps, all from one config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Config(String),
    /// Exit code 3.
    Numerical(String),
    /// Exit code 4.
    Acceptance(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Acceptance(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Acceptance(m) => write!(f, "acceptance failure: {m}"),
        }
    }
}

impl From<backstep::Error> for CliError {
    fn from(e: backstep::Error) -> Self {
        use backstep::Error as E;
        match e {
            E::Precondition(_) | E::Parameter(_) | E::Grid(_) | E::Contract(_) | E::Domain(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "backstep", version, about = "Backstepping stabilization of a disturbed 1-D wave equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory, created if absent.
    #[arg(short, long)]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
    /// Overrides `section.key=value`, applied after the file.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Kernel, trace and scalar tables plus a refinement study.
    Kernel(Common),
    /// One simulation with its trajectory and energy report.
    Simulate(Common),
    /// Sigma sweep of the regularized stationary problem.
    Resolvent(Common),
    /// Run the acceptance criteria.
    Verify {
        /// Optional configuration; only its seed is used.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Directory for `verify.json`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Overwrite an existing `verify.json`.
        #[arg(long)]
        force: bool,
        /// Comma-separated criterion ids.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
        /// Print the JSON report instead of one line per criterion.
        #[arg(long)]
        json: bool,
    },
    /// Simulations over the values of `[sweep]`, run in parallel.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Worker threads; all cores when absent.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Kernel(c) => commands::kernel(&c.config, &c.overrides, &commands::Output::new(c.out, c.force)),
        Command::Simulate(c) => commands::simulate(&c.config, &c.overrides, &commands::Output::new(c.out, c.force)),
        Command::Resolvent(c) => commands::resolvent(&c.config, &c.overrides, &commands::Output::new(c.out, c.force)),
        Command::Verify { config, out, force, only, json } => {
            commands::verify(config.as_deref(), out.map(|o| commands::Output::new(o, force)).as_ref(), &only, json)
        }
        Command::Sweep { common: c, jobs } => {
            commands::sweep(&c.config, &c.overrides, &commands::Output::new(c.out, c.force), jobs)
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("backstep: {e}");
            ExitCode::from(e.code())
        }
    }
}
