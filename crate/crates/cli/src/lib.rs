//! Command-line front end: `optimize`, `run`, `eval`, `screen`, `report`.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
//! 3 backend or transport error.

pub mod args;
pub mod backend;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod report;

use std::fmt;

pub use args::Cli;
pub use commands::run;

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl fmt::Display) -> Self {
        Self { code: EXIT_USAGE, message: message.to_string() }
    }

    pub fn backend(message: impl fmt::Display) -> Self {
        Self { code: EXIT_BACKEND, message: message.to_string() }
    }

    pub fn internal(message: impl fmt::Display) -> Self {
        Self { code: EXIT_INTERNAL, message: message.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}
