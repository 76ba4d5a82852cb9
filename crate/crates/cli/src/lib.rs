//! Command-line front end for the token-merging encoder.

pub mod args;
pub mod commands;
pub mod config;
pub mod io;

use algm_core::{AlgmError, WeightError};

pub use args::Cli;

/// Runs a parsed command line inside a pool of `--threads` workers.
pub fn execute(cli: &Cli) -> Result<(), AlgmError> {
    algm_core::exec::with_threads(cli.threads, || commands::execute(cli))?
}

/// Process exit code for an error class.
pub fn exit_code(e: &AlgmError) -> i32 {
    match e {
        AlgmError::Config { .. } | AlgmError::Argument(_) => 2,
        AlgmError::Io { .. } => 3,
        AlgmError::Shape(_) => 4,
        AlgmError::Weights(
            WeightError::ShapeMismatch { .. } | WeightError::MissingTensor(_) | WeightError::UnexpectedTensor(_),
        ) => 4,
        AlgmError::Weights(_) => 3,
        AlgmError::Integrity(_) => 5,
        AlgmError::Precondition(_) => 1,
    }
}
