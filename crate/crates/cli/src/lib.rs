//! Command-line front end for `ensemble_uq`.

pub mod args;
pub mod commands;
mod output;

use std::io::ErrorKind;
use std::path::PathBuf;

use ensemble_uq::{Error, Result};

pub use args::{Cli, Command};

pub const EXIT_OK: u8 = 0;
pub const EXIT_GENERIC: u8 = 1;
pub const EXIT_INPUT_MISSING: u8 = 2;
pub const EXIT_GEOMETRY_MISMATCH: u8 = 3;
pub const EXIT_INVALID_SPEC: u8 = 4;
pub const EXIT_INVALID_TRANSFORM: u8 = 5;

/// Process exit code for an error.
pub fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => EXIT_INPUT_MISSING,
        Error::IncompatibleMember(_) | Error::IncompatibleVolumes(_) => EXIT_GEOMETRY_MISMATCH,
        Error::InvalidSpec(_) | Error::EmptyEnsemble => EXIT_INVALID_SPEC,
        Error::InvalidTransform(_) => EXIT_INVALID_TRANSFORM,
        _ => EXIT_GENERIC,
    }
}

/// Runs one subcommand and returns the files it wrote.
pub fn run(command: &Command) -> Result<Vec<PathBuf>> {
    match command {
        Command::Fuse(a) => commands::fuse(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Rank(a) => commands::rank(a),
        Command::Synth(a) => commands::synth(a),
        Command::Tta(a) => commands::tta(a),
    }
}
