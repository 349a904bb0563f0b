//! `dcchi`: simulate, reconstruct, train, verify and analyze.
//!
//! Exit codes: 0 ok, 2 config or input error, 3 numeric failure, 4 format
//! error. `DCCHI_THREADS` caps the worker pool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcchi_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dcchi", version, about = "Dual-camera compressive hyperspectral imaging")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML run configuration; relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the model-initialization, noise and synthetic-scene seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// CG iterations per data step.
    #[arg(long, global = true)]
    pub cg_iters: Option<usize>,
    /// Number of unrolled stages K.
    #[arg(long, global = true)]
    pub stages: Option<usize>,
    #[arg(long, global = true)]
    pub disable_crw: bool,
    #[arg(long, global = true)]
    pub disable_mhac: bool,
    #[arg(long, global = true)]
    pub disable_mhas: bool,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Renders CASSI and PAN measurements of a scene cube.
    Simulate {
        /// Scene cube; overrides `paths.scene`.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Render a seeded synthetic scene (also written as `scene.dct`).
        #[arg(long, conflicts_with = "scene")]
        synthetic: bool,
    },
    /// Reconstructs a cube from measurements with a checkpointed model.
    Reconstruct {
        #[arg(long)]
        cassi: Option<PathBuf>,
        #[arg(long)]
        pan: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ground truth for PSNR/SSIM.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Use the seeded model with identity denoisers instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        identity: bool,
    },
    /// Trains the unrolled model and writes a checkpoint and loss log.
    Train {
        /// Directory of training cubes; overrides `paths.dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Train on this many seeded synthetic scenes instead of a dataset.
        #[arg(long, conflicts_with = "dataset")]
        synthetic: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Finite-difference checks of every primitive and the full network.
    Gradcheck {
        /// Primitives only.
        #[arg(long)]
        quick: bool,
    },
    /// CG-iteration and break-down ablation tables.
    Ablate {
        #[arg(long, value_enum, default_value = "all")]
        study: commands::Study,
        /// Model for the CG study; identity denoisers when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Held-out cube; a seeded synthetic scene when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Training steps per break-down variant.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Timing samples per row; the mean of the fastest quarter is reported.
        #[arg(long, default_value_t = 11)]
        repeats: usize,
    },
    /// Compares PAN- and HSI-derived correlation maps.
    AnalyzeCorr {
        /// Scene cubes; seeded synthetic scenes when none are given.
        #[arg(long = "scene")]
        scenes: Vec<PathBuf>,
        /// Number of synthetic scenes.
        #[arg(long, default_value_t = 10)]
        synthetic: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::State(_) => 3,
        Error::Format { .. } => 4,
        Error::Config(_) | Error::Dimension(_) | Error::Io(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match std::env::var("DCCHI_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => {
                eprintln!("error: DCCHI_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        },
        Err(_) => None,
    };
    dcchi_core::par::init_threads(threads);
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
