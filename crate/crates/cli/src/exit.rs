//! Process exit codes.

use std::fmt;

use tic_core::TicError;

pub const CONFIG: u8 = 2;
pub const DIVERGED: u8 = 3;
pub const DIMENSION: u8 = 4;
pub const CAP: u8 = 5;
pub const OTHER: u8 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: CONFIG,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            code: OTHER,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<TicError> for CliError {
    fn from(e: TicError) -> Self {
        let code = match e {
            TicError::InvalidSpec(_) | TicError::InvalidArgument(_) | TicError::LabelOutOfRange { .. } => CONFIG,
            TicError::DimensionMismatch { .. } => DIMENSION,
            TicError::CapExceeded { .. } => CAP,
            TicError::AllDiverged(_) => DIVERGED,
            _ => OTHER,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}
