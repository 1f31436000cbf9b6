use std::fmt;
use std::path::Path;

use uad_core::Error;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Core(Error::io(path, e))
    }

    /// Process exit status: usage 2, data 3, numeric 4, io 5.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Argument(_) | Error::Config(_) => 2,
                Error::Parse { .. } | Error::Format(_) | Error::Schema(_) | Error::Data(_) => 3,
                Error::Numeric { .. } => 4,
                Error::Io { .. } => 5,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}
