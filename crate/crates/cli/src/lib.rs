//! Command-line driver: config parsing, experiment runs and subcommands.

pub mod commands;
pub mod config;
pub mod experiment;

use salm_core::error::ErrorKind;
use salm_core::Error;

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Configuration => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}
