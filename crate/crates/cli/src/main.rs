//! `poecaps`: train the convolutional front end, the capsule encoder and
//! decoder in turn, then generate image grids from the capsule space.
//!
//! Exit status is 0 on success, 1 on a numerical failure (divergence, a
//! failed gradient check) and 2 on usage or I/O errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "poecaps", version, about = "Products of expert capsules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the convolutional autoencoder on an IDX image file.
    TrainConv {
        #[command(flatten)]
        common: Common,
        /// Square kernel size of both convolutions.
        #[arg(long)]
        kernel: Option<usize>,
        /// Channels of both hidden volumes (a multiple of 8).
        #[arg(long)]
        hidden_channels: Option<usize>,
    },
    /// Train the capsule encoder on top of a frozen autoencoder.
    TrainCaps {
        #[command(flatten)]
        common: Common,
        /// Number of upper capsules.
        #[arg(long)]
        capsules: Option<usize>,
        /// Dimension of the upper capsules.
        #[arg(long)]
        capsule_dim: Option<usize>,
    },
    /// Train the capsule decoder with the encoder frozen.
    TrainDecoder {
        #[command(flatten)]
        common: Common,
    },
    /// Sample the capsule space and write a PGM grid, one column per capsule.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Sample only from the hemisphere of orientations seen in training.
        #[arg(long)]
        restricted: bool,
        /// Samples per capsule.
        #[arg(long)]
        rows: Option<usize>,
        /// Only this capsule (a single column).
        #[arg(long)]
        capsule: Option<usize>,
        /// Also write every noise vector, one per line.
        #[arg(long)]
        noise_out: Option<PathBuf>,
    },
    /// Compare the analytic data-term gradient with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Finite-difference step.
        #[arg(long)]
        eps: Option<f64>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// IDX image file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to read.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output checkpoint or image.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    /// Per-epoch learning-rate factor.
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    routing_iters: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Standard deviation of the capsule weight initialization.
    #[arg(long)]
    init_std: Option<f64>,
    /// Use only the first N images.
    #[arg(long)]
    limit: Option<usize>,
}

/// An error with the exit code it maps to.
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

    pub fn numerical(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<poecaps::Error> for Failure {
    fn from(e: poecaps::Error) -> Self {
        Failure {
            code: if e.is_numerical() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("poecaps: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
