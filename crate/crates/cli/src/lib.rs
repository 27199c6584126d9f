//! Command-line pipeline around `noisectl-core`: dataset synthesis, noise
//! sampling, collaboration fitting, denoiser training, generation,
//! evaluation and ablation. Every run writes into its own directory with a
//! hashed manifest.

use std::ffi::OsString;
use std::path::Path;

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;

pub use args::Cli;
pub use config::RunConfig;

/// Exit status for configuration and usage errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<noisectl_core::Error> for CliError {
    fn from(e: noisectl_core::Error) -> Self {
        match e {
            noisectl_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Parse `argv` (program name first), run the subcommand and return the
/// process exit code. Messages go to stdout, errors to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match commands::dispatch(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("noisectl: {e}");
            e.exit_code()
        }
    }
}
