use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mbrw::stats::Verdict;
use serde::Serialize;

mod commands;
mod run;

/// Simulation and numerical checks for branching products of nonnegative
/// matrices.
#[derive(Debug, Parser, Serialize)]
#[command(name = "mbrw", version)]
pub struct Cli {
    /// Model JSON file.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Boundary data written by `mbrw calibrate`.
    #[arg(long, global = true)]
    pub boundary: Option<PathBuf>,
    /// Experiment configuration JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Master seed (default 1).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 means one per core. Falls back to MBRW_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    #[arg(long, global = true)]
    pub replicas: Option<usize>,
    /// Direction grid size per coordinate.
    #[arg(long, global = true)]
    pub grid_size: Option<usize>,
    /// Starting direction, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub x0: Option<Vec<f64>>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Solve for the boundary exponent and cache the eigen-data.
    Calibrate {
        /// Keep this exponent and rescale the matrices instead.
        #[arg(long)]
        fix_alpha: Option<f64>,
    },
    /// Dominant eigen-triples of the transfer operator.
    Spectral {
        #[arg(long, value_delimiter = ',')]
        s: Vec<f64>,
    },
    /// Simulate the branching system and record martingale series.
    Simulate {
        #[arg(long, value_delimiter = ',')]
        s: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        b0: f64,
        /// Relative pruning threshold.
        #[arg(long)]
        prune: Option<f64>,
    },
    /// Spine paths and the spinal-measure battery.
    Spine {
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
    },
    /// Renewal theory for the tilted walk.
    Renewal {
        #[command(subcommand)]
        task: RenewalTask,
    },
    /// Consistency battery for a calibrated model.
    Verify,
    /// One of: biggins, derivative, seneta-heyde, fixed-point.
    Experiment { name: String },
}

#[derive(Debug, Subcommand, Serialize)]
pub enum RenewalTask {
    /// Tabulate the harmonic function of the killed walk.
    VTable {
        #[arg(long, default_value_t = 20.0)]
        y_max: f64,
        #[arg(long, default_value_t = 1.0)]
        y_step: f64,
        #[arg(long, default_value_t = 8)]
        v_grid: usize,
    },
    /// Killed renewal measure and the ladder sandwich over a range of windows.
    Scan {
        #[arg(long, value_delimiter = ',')]
        y: Vec<f64>,
        #[arg(long, default_value_t = -20.0, allow_negative_numbers = true)]
        t_min: f64,
        #[arg(long, default_value_t = 40.0)]
        t_max: f64,
        #[arg(long, default_value_t = 2.0)]
        t_step: f64,
        #[arg(long, default_value_t = 1.0)]
        a: f64,
        #[arg(long, default_value_t = 200_000)]
        horizon: usize,
        #[arg(long, default_value_t = 200_000)]
        ladder_horizon: usize,
        #[arg(long, default_value_t = 0.25)]
        tolerance: f64,
    },
    /// Killed Green functional at several heights.
    Green {
        #[arg(long, value_delimiter = ',')]
        b: Vec<f64>,
        /// exp, inverse-cube or zero.
        #[arg(long, default_value = "exp")]
        f: String,
        #[arg(long, default_value_t = 200_000)]
        horizon: usize,
    },
    /// Conditioned local limit slope.
    Cllt {
        #[arg(long, default_value_t = 1.0)]
        y: f64,
        #[arg(long, default_value_t = 2.0)]
        z: f64,
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
    },
    /// Bound on the gap between forward and reversed paths.
    Reversed,
    /// Spitzer-type bound.
    Spitzer {
        #[arg(long, default_value_t = 4.0)]
        factor: f64,
        #[arg(long, default_value_t = 200_000)]
        horizon: usize,
    },
}

fn threads(cli: &Cli) -> Result<usize, mbrw::Error> {
    if let Some(t) = cli.threads {
        return Ok(t);
    }
    match std::env::var("MBRW_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| mbrw::Error::config("MBRW_THREADS", format!("not a thread count: {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads(&cli).and_then(|t| commands::dispatch(&cli, t));
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            match outcome.verdict {
                Verdict::Pass => ExitCode::SUCCESS,
                Verdict::Inconclusive => {
                    eprintln!("warning: some checks were inconclusive; raise --replicas");
                    ExitCode::SUCCESS
                }
                Verdict::Fail => {
                    eprintln!("error: at least one check failed; see {}", cli.out.display());
                    ExitCode::from(2)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
