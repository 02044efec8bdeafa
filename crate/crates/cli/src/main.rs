//! `mrenewal`: command line front end for Markov renewal computations.
//!
//! Exit codes: 0 on success, 1 for invalid input, 2 for numerical failure.

mod commands;
mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use markov_renewal::Error;

use crate::commands::Run;
use crate::config::Config;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn validation(message: String) -> Self {
        Self { code: 1, message }
    }

    /// Failure inside a numerical module; input errors from the core still map to 1.
    pub fn numerical(module: &str, e: Error) -> Self {
        let code = if e.is_numerical() { 2 } else { 1 };
        Self { code, message: format!("{module}: {e}") }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: 1, message: format!("{}: {e}", path.display()) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected A,B")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("bad window start: {e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("bad window end: {e}"))?;
    if !(b > a) {
        return Err(format!("window [{a}, {b}] is empty"));
    }
    Ok((a, b))
}

fn parse_positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
        Ok(x) => Err(format!("{x} is not positive")),
        Err(e) => Err(e.to_string()),
    }
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Debug, Clone, Args)]
pub struct Flags {
    /// Model configuration (JSON)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Master seed for simulation
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of simulated paths or samples
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Grid window as A,B
    #[arg(long, global = true, allow_hyphen_values = true, value_parser = parse_window)]
    pub window: Option<(f64, f64)>,
    /// Grid step
    #[arg(long, global = true, value_parser = parse_positive)]
    pub step: Option<f64>,
    /// Tolerance for Perron iteration and root finding
    #[arg(long, global = true, value_parser = parse_positive)]
    pub tol: Option<f64>,
}

#[derive(Debug, Parser)]
#[command(name = "mrenewal", version, about = "Markov renewal theory with quasi-stochastic weights")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Perron data, harmonic transform, drift and lattice type
    Analyze,
    /// Renewal measures V and U with Blackwell and Stone diagnostics
    Renewal,
    /// Solve a Markov renewal equation and compare with its limit
    Solve,
    /// Simulate the Markov random walk and estimate cycle quantities
    Simulate,
    /// Applications
    #[command(subcommand)]
    App(App),
}

#[derive(Debug, Subcommand)]
enum App {
    /// Tail of the stationary waiting time of a Markov modulated queue
    Lindley,
    /// Malthusian parameter of a multitype branching process
    Branching,
    /// Tails of a Markov modulated perpetuity
    Perpetuity,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli.flags.config.as_ref().ok_or_else(|| CliError::validation("--config is required".into()))?;
    let cfg = Config::load(path)?;
    let mut r = Run::new(&cfg, &cli.flags);
    match &cli.command {
        Command::Analyze => r.analyze()?,
        Command::Renewal => r.renewal()?,
        Command::Solve => r.solve()?,
        Command::Simulate => r.simulate()?,
        Command::App(App::Lindley) => r.lindley()?,
        Command::App(App::Branching) => r.branching()?,
        Command::App(App::Perpetuity) => r.perpetuity()?,
    }
    r.write_summary()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
