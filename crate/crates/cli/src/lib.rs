//! Command-line front end: `simulate`, `fit` and `benchmark`.

pub mod args;
pub mod commands;
pub mod manifest;

use args::{Cli, Command};
use commands::{CliError, EXIT_INPUT};

/// Thread count from the flag, then `MPLNET_THREADS`, then rayon's default.
pub fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(t) = flag {
        return Ok(Some(t));
    }
    match std::env::var("MPLNET_THREADS") {
        Ok(v) if !v.trim().is_empty() => v.trim().parse().map(Some).map_err(|_| CliError {
            code: EXIT_INPUT,
            message: format!("MPLNET_THREADS = '{v}' is not a thread count"),
        }),
        _ => Ok(None),
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(t) = resolve_threads(cli.threads)? {
        if t == 0 {
            return Err(CliError {
                code: EXIT_INPUT,
                message: "thread count must be at least 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| CliError {
            code: EXIT_INPUT,
            message: e.to_string(),
        })?;
    }
    match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Benchmark(a) => commands::benchmark(a),
    }
}
