//! `pstrat`: balance diagnostics, model fits, sensitivity sweeps and
//! synthetic data from the command line.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_grid, read_structured, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "pstrat", version, about = "Principal stratification estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Covariate balance (ASD) and propensity-score overlap tables.
    Balance {
        #[command(flatten)]
        shared: Shared,
        /// Histogram bins for the overlap table.
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Fit the model and report every estimand.
    Fit {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Refit over a grid of eta_n values.
    Sensitivity {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Generate a synthetic dataset and its truth record.
    Simulate {
        #[command(flatten)]
        shared: Shared,
        /// Generator spec (TOML, or JSON with a .json extension).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Shared {
    /// Input CSV with columns z, d, y and covariates.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// `free` or a fixed value.
    #[arg(long, allow_hyphen_values = true)]
    xi: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    eta_c: Option<f64>,
    /// A value, or a comma-separated grid for `sensitivity`.
    #[arg(long, allow_hyphen_values = true)]
    eta_n: Option<String>,
    /// Fit the model without sensitivity parameters.
    #[arg(long)]
    base: bool,
    /// Bootstrap replicates for the CATT (0 = off).
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Drop units with propensity score outside [t, 1 - t].
    #[arg(long)]
    trim: Option<f64>,
}

fn base_config(shared: &Shared) -> Result<RunConfig, CliError> {
    let mut c: RunConfig = match &shared.config {
        Some(path) => read_structured(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &shared.input {
        c.input = Some(v.clone());
    }
    if let Some(v) = &shared.out {
        c.out = v.clone();
    }
    if let Some(v) = shared.seed {
        c.seed = Some(v);
    }
    if let Some(v) = shared.threads {
        c.threads = Some(v);
    }
    Ok(c)
}

fn apply_model(c: &mut RunConfig, m: &ModelArgs) -> Result<(), CliError> {
    if let Some(v) = &m.xi {
        c.model.xi = v.clone();
    }
    if let Some(v) = m.eta_c {
        c.model.eta_c = v;
    }
    if let Some(v) = &m.eta_n {
        c.model.eta_n = Some(parse_grid(v).map_err(|e| CliError::Validation(format!("--eta-n: {e}")))?);
    }
    if m.base {
        c.model.base = true;
    }
    if let Some(v) = m.bootstrap {
        c.bootstrap.b = v;
    }
    if let Some(v) = m.tol {
        c.em.tol = v;
    }
    if let Some(v) = m.max_iter {
        c.em.max_iter = v;
    }
    if let Some(v) = m.restarts {
        c.em.restarts = v;
    }
    if let Some(v) = m.trim {
        c.propensity.trim = Some(v);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, config) = match &cli.command {
        Command::Balance { shared, bins } => {
            let mut c = base_config(shared)?;
            if let Some(b) = bins {
                c.propensity.bins = *b;
            }
            ("balance", c)
        }
        Command::Fit { shared, model } | Command::Sensitivity { shared, model } => {
            let mut c = base_config(shared)?;
            apply_model(&mut c, model)?;
            let name = if matches!(cli.command, Command::Fit { .. }) { "fit" } else { "sensitivity" };
            (name, c)
        }
        Command::Simulate { shared, spec } => {
            let mut c = base_config(shared)?;
            if let Some(s) = spec {
                c.simulate.spec = Some(s.clone());
            }
            ("simulate", c)
        }
    };
    let mut config = config;
    let threads = config
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(CliError::Validation("--threads must be at least 1".into()));
    }
    config.threads = Some(threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
    pool.install(|| match name {
        "balance" => commands::balance(config),
        "fit" => commands::fit(config),
        "sensitivity" => commands::sensitivity(config),
        _ => commands::simulate(config),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pstrat: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
