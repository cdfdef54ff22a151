//! `locodl` command-line front end.

mod commands;
mod config;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CertifyArgs, CertificationFailed, Probe, Vary};

#[derive(Parser)]
#[command(name = "locodl", version, about = "Compressed local-training experiments for distributed optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every algorithm block of an experiment file.
    Run {
        config: PathBuf,
        #[arg(long, env = "LOCODL_OUT_DIR", default_value = "out")]
        out: PathBuf,
        /// Replace the seed list of the file.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Rerun an experiment file over a list of values of one problem field.
    Sweep {
        config: PathBuf,
        /// `kappa=1e2,1e3,1e4`, `n=10,20` or `data_seed=0,1`.
        #[arg(long)]
        vary: Vary,
        #[arg(long, env = "LOCODL_OUT_DIR", default_value = "out")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Check a compressor's unbiasedness and variance empirically.
    Certify {
        compressor: String,
        #[arg(long)]
        d: usize,
        /// Sparsity for rand-k and rand-k-natural.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "ones")]
        probe: Probe,
        /// Certify against this ω instead of the closed form.
        #[arg(long, hide = true)]
        declared_omega: Option<f64>,
    },
    /// Draw trace CSV files as an SVG line plot.
    Plot {
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        #[arg(long, default_value = "bits_per_client")]
        x: String,
        #[arg(long, default_value = "sqdist_mean")]
        y: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<CertificationFailed>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<locodl::Error>() {
            return match e {
                locodl::Error::Config(_) => 3,
                locodl::Error::Convergence { .. } => 4,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return 2;
        }
    }
    1
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, out, seeds } => commands::cmd_run(&config, &out, seeds),
        Command::Sweep { config, vary, out, seeds } => commands::cmd_sweep(&config, &out, &vary, seeds),
        Command::Certify { compressor, d, k, trials, seed, probe, declared_omega } => {
            commands::cmd_certify(&CertifyArgs { compressor, d, k, trials, seed, declared_omega, probe })
        }
        Command::Plot { csvs, x, y, out } => plot::cmd_plot(&csvs, &x, &y, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            if !err.is::<CertificationFailed>() {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(code)
        }
    }
}
