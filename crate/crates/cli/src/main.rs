//! `ssep`: reproducible experiment runner for the exclusion engine.
//!
//! Exit status: 0 ok, 1 usage or configuration error, 2 numerical failure,
//! 3 threshold violated under `--assert`.

mod commands;
mod config;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use config::{Loaded, Validate};
use manifest::{config_hash, Output};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(ssep_core::Error),
}

impl From<ssep_core::Error> for CliError {
    fn from(e: ssep_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(ssep_core::Error::Numerical(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "ssep", version, about = "Symmetric exclusion in dynamic conductances: experiments and diagnostics")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SSEP_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config, TOML (or JSON by extension).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the one in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Exit with status 3 when a threshold of the run is violated.
    #[arg(long)]
    assert: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an environment, write it as JSON, optionally survey island radii.
    Env(RunArgs),
    /// Transition kernel of the walk on a time window.
    Kernel(RunArgs),
    /// Check stirring against backward-walk lookups.
    Duality(RunArgs),
    /// Evaluate the mild-solution identity pathwise.
    Mild(RunArgs),
    /// Estimate the diffusion matrix from rescaled walkers.
    Sigma(RunArgs),
    /// Empirical density field against the heat-equation reference over several scales.
    Hydro(RunArgs),
    /// Modulus of continuity, increment tails and the psi/phi bounds.
    Tightness(RunArgs),
    /// Kernel decay, continuity exponent and noise variance.
    Diagnose(RunArgs),
    /// Gather result directories into one tidy CSV per figure.
    Plot {
        /// Result directories to read (repeatable).
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn run<T>(name: &str, args: &RunArgs, f: fn(&Loaded<T>, &mut Output) -> Result<commands::Failures, CliError>) -> Result<bool, CliError>
where
    T: DeserializeOwned + Validate,
{
    let loaded: Loaded<T> = config::load(&args.config, name, args.seed)?;
    loaded.block.validate()?;
    let mut out = Output::new(&args.out)?;
    let failures = f(&loaded, &mut out)?;
    let checked = if args.assert { failures } else { Vec::new() };
    let manifest = out.finish(name, config_hash(name, &loaded.canonical), loaded.seed, checked)?;
    for m in &manifest.assertion_failures {
        eprintln!("assertion failed: {m}");
    }
    Ok(manifest.assertion_failures.is_empty())
}

fn dispatch(cli: Cli) -> Result<bool, CliError> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Env(a) => run("env", a, commands::env),
        Command::Kernel(a) => run("kernel", a, commands::kernel),
        Command::Duality(a) => run("duality", a, commands::duality),
        Command::Mild(a) => run("mild", a, commands::mild),
        Command::Sigma(a) => run("sigma", a, commands::sigma),
        Command::Hydro(a) => run("hydro", a, commands::hydro),
        Command::Tightness(a) => run("tightness", a, commands::tightness),
        Command::Diagnose(a) => run("diagnose", a, commands::diagnose),
        Command::Plot { input, out } => {
            for f in plot::emit_plot_data(input, out)? {
                println!("{}", out.join(f).display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ssep_core::Error;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::from(Error::Numerical("x".into())).exit_code(), 2);
        for e in [Error::Pipeline("x".into()), Error::Schema("x".into()), Error::Domain("x".into()), Error::Validation("x".into())] {
            assert_eq!(CliError::from(e).exit_code(), 1);
        }
    }
}
