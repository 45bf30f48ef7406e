//! Experiment driver: corpus generation, training, evaluation, ablation
//! sweeps and temporal-norm export.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for I/O and
//! format errors.

pub mod commands;
pub mod config;
pub mod manifest;

use std::fmt;

/// Failure of a command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    /// Configuration error from the core library, tagged with its section.
    pub fn in_section(section: &str, e: refine3d_core::Error) -> Self {
        match e {
            refine3d_core::Error::Config(m) => CliError::Config(format!("[{section}] {m}")),
            other => CliError::Config(format!("[{section}] {other}")),
        }
    }

    pub fn io(context: impl fmt::Display, err: impl fmt::Display) -> Self {
        CliError::Io(format!("{context}: {err}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<refine3d_core::Error> for CliError {
    fn from(e: refine3d_core::Error) -> Self {
        use refine3d_core::Error as E;
        match e {
            E::Io(_) | E::Json(_) | E::Format(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
