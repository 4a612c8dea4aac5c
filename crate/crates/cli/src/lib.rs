//! Library side of the `serpent` binary: configuration loading and the
//! command implementations, kept here so they can be tested directly.

pub mod commands;
pub mod config;

use std::fmt;

use serpent_core::Error;

pub use config::{keys_help, Paths, RunConfig, KEYS};

/// Process exit codes.
pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_BAD_INPUT: u8 = 2;
pub const EXIT_MISMATCH: u8 = 3;

/// An error message paired with the exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_BAD_INPUT, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(EXIT_BAD_INPUT, message)
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self::new(EXIT_RUNTIME, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Mismatch { .. } => EXIT_MISMATCH,
            Error::Config(_) | Error::Data { .. } | Error::Format(_) | Error::Image(_) | Error::Json(_) => {
                EXIT_BAD_INPUT
            }
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_BAD_INPUT,
            _ => EXIT_RUNTIME,
        };
        let message = match e {
            Error::Mismatch {
                field,
                checkpoint,
                config,
            } => format!(
                "checkpoint does not match configuration: `model.{field}` is {checkpoint} in the checkpoint but {config} in the config"
            ),
            other => other.to_string(),
        };
        Self { code, message }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}
