use std::fmt;
use std::io;

use vdan_core::{Error, FormatError};

#[derive(Debug)]
pub enum CliError {
    /// Bad config, arguments or input files.
    Invalid(String),
    /// Failure while running a valid command.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Failed(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::Config { .. } => CliError::Invalid(e.to_string()),
            Error::Format(FormatError::Io(io)) if io.kind() == io::ErrorKind::NotFound => {
                CliError::Invalid(e.to_string())
            }
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Failed(format!("i/o error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Failed(format!("json error: {e}"))
    }
}
