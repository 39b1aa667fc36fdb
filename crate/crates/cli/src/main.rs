//! Command-line front end for the QG lab.

mod commands;
mod context;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qgtl_core::config::Scale;

#[derive(Parser, Debug)]
#[command(name = "qgtl", version, about = "Two-layer QG turbulence: data, CNN closures, transfer learning, spectral analysis")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Experiment configuration; the shipped configs/experiment.toml when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub scale: Option<Scale>,
    /// Output root; overrides the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the high-resolution solver and store PV snapshots.
    Simulate {
        #[arg(long)]
        case: Option<String>,
        /// Number of steps; defaults to the profile's spin-up length.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        interval: Option<u64>,
    },
    /// Generate a filtered, coarsened training or test set.
    Datagen {
        #[arg(long)]
        case: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a network from scratch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Re-train selected layers of a base network on a fraction of target data.
    Transfer {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        /// Comma-separated one-based layer numbers.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Offline scores of a network on a dataset.
    EvalOffline {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
    /// Coupled low-resolution runs against a filtered high-resolution reference.
    EvalOnline {
        #[arg(long)]
        case: Option<String>,
        /// Network closure; only the reference and the bare run when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        years: Option<f64>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Kernel clustering and spectral maxima, optionally before and after transfer.
    Explain {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        tl: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        layer: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Largest k in the inertia table.
        #[arg(long, default_value_t = 12)]
        k_max: usize,
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        name: Option<String>,
    },
    /// Activation and output spectra of a network on a dataset.
    Spectra {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Use at most this many samples.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        name: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
