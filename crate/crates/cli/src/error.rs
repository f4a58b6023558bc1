use std::fmt;

use trust_core::Error;

/// Failure of a command, carrying its exit code class.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or inputs. Exit code 2.
    Usage(String),
    /// A verification failed or a computation could not finish. Exit code 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Dimension { .. }
            | Error::Parameter(_)
            | Error::EnumerationCap { .. }
            | Error::Checksum(_)
            | Error::Load(_)
            | Error::Io(_)
            | Error::Json(_) => CliError::Usage(e.to_string()),
            Error::Contract(_) | Error::Singular(_) | Error::NonFinite(_) => CliError::Failed(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}
