//! `lmk`: batch front end for fitting, simulating, decoding, and
//! forecasting latent Markov models from declarative TOML configs and CSV
//! data. Exit codes: 0 success, 1 input or runtime error, 2 a fit ran but
//! did not converge.

mod config;
mod data;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "lmk", version, about = "Latent Markov model toolkit")]
struct Cli {
    /// Worker threads for parallel per-id fits and gradient evaluation.
    /// Defaults to the LMK_THREADS environment variable, then 1.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct IoArgs {
    /// Model configuration (or estimates file from a previous fit).
    #[arg(long)]
    config: PathBuf,
    /// Input data CSV.
    #[arg(long)]
    data: PathBuf,
    /// Output directory, created if absent.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Maximum-likelihood fit; writes an estimates file that is itself a
    /// runnable config for decode and forecast.
    Fit {
        #[command(flatten)]
        io: IoArgs,
        /// Fit each id separately, one estimates file per id.
        #[arg(long)]
        per_id: bool,
    },
    /// Draw synthetic data from the configured model; writes data.csv and
    /// the latent truth.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the [simulate] block.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Most probable state path per row, appended to the data columns.
    Decode {
        #[command(flatten)]
        io: IoArgs,
    },
    /// One-step-ahead forecast density and lower-tail value at risk, with
    /// an optional rolling holdout backtest.
    Forecast {
        #[command(flatten)]
        io: IoArgs,
        /// Lower-tail quantile level for the reported value at risk.
        #[arg(long, default_value_t = 0.01)]
        level: f64,
    },
}

fn thread_count(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("LMK_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(1)
    .max(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(cli.threads))
        .build_global()
    {
        eprintln!("error: cannot configure thread pool: {e}");
        return ExitCode::from(1);
    }
    let outcome = match &cli.command {
        Command::Fit { io, per_id } => run::cmd_fit(&io.config, &io.data, &io.out, *per_id),
        Command::Simulate { config, out, seed } => run::cmd_simulate(config, out, *seed),
        Command::Decode { io } => run::cmd_decode(&io.config, &io.data, &io.out),
        Command::Forecast { io, level } => run::cmd_forecast(&io.config, &io.data, &io.out, *level),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
