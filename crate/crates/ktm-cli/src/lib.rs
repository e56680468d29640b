//! Library surface of the `ktm` binary: run configuration, trainer
//! persistence, and the subcommand implementations.

pub mod ckpt;
pub mod commands;
pub mod config;

/// Error carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Diverged(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Diverged(m) | CliError::Io(m) => m,
        }
    }
}
