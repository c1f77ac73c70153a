// `!(x < y)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mroute_core::{Error, ScheduleMode};

mod check;
mod commands;

/// Language-measure routing: optimal supervision of lossy multi-hop networks.
#[derive(Parser, Debug)]
#[command(name = "mroute", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Centralized optimum: measures, forwarding policy and delivery probabilities.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        theta: ThetaArg,
    },
    /// Run the per-node protocol to convergence and compare with the centralized optimum.
    Distribute {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        theta: ThetaArg,
        #[command(flatten)]
        run: RunArgs,
        /// Initial measures: `zero` or `random:SEED`.
        #[arg(long, default_value = "zero")]
        init: String,
    },
    /// Exhaustive policy enumeration (at most 24 links).
    Enumerate {
        #[command(flatten)]
        common: Common,
        /// Also report how far the converged policy falls below the envelope.
        #[command(flatten)]
        theta: OptionalThetaArg,
    },
    /// Play a scenario script against a topology.
    Scenario {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        theta: ThetaArg,
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Mean rounds to convergence over random topologies for a grid of sizes and ε.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        grid_n: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        grid_eps: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 6)]
        max_degree: usize,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Property battery on random instances (plus `--topology` if given).
    Check {
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Random instances per property.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write a random topology file.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 6)]
        max_degree: usize,
        #[arg(long, default_value_t = 0.05)]
        drop_min: f64,
        #[arg(long, default_value_t = 0.6)]
        drop_max: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output file.
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    topology: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct OutArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct ThetaArg {
    /// Target optimality gap; θ = ε / m² with m the maximum degree.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
}

#[derive(Args, Debug)]
#[group(required = false, multiple = false)]
struct OptionalThetaArg {
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, default_value_t = ScheduleMode::Sync)]
    schedule: ScheduleMode,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_input_error() { 2 } else { 3 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
