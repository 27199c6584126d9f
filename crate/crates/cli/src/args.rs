//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use noisectl_core::prior::NoiseMode;

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "noisectl", version, about = "Structured noise priors for multi-view video diffusion")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file (`key = value`, `[object]` sections).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to `runs/<subcommand>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "NOISECTL_THREADS")]
    pub threads: Option<usize>,
    /// Shared-component weight.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    /// Cross-channel weight of the shared component.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Collaboration window; 0 disables collaboration.
    #[arg(long = "window-k", visible_alias = "K", global = true)]
    pub window_k: Option<usize>,
    #[arg(long, global = true)]
    pub frames: Option<usize>,
    /// full, nocollab, firstframe, nodecomp or baseline.
    #[arg(long, global = true)]
    pub mode: Option<NoiseMode>,
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            eta: self.eta,
            lambda: self.lambda,
            window_k: self.window_k,
            frames: self.frames,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic six-view scene and its latents and masks.
    Synth,
    /// Draw structured noise videos from the configured prior.
    SampleNoise {
        /// Dataset directory from `synth`; the scene is rendered if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Collaboration parameters; fitted on the fly if absent.
        #[arg(long)]
        collab: Option<PathBuf>,
    },
    /// Fit the collaboration matrices.
    FitCollab,
    /// Train the background/foreground denoiser pair on one scene.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        collab: Option<PathBuf>,
    },
    /// Generate a video with trained denoisers.
    Generate {
        /// Run directory of `train`.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        collab: Option<PathBuf>,
    },
    /// Score the output of a `sample-noise` or `generate` run.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Compare noise modes over several seeds.
    Ablate {
        /// Comma-separated noise modes.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<NoiseMode>>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Oracle-equivalence, reconstruction and moment checks.
    Selftest,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::SampleNoise { .. } => "sample-noise",
            Command::FitCollab => "fit-collab",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Selftest => "selftest",
        }
    }
}
