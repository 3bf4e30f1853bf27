use std::fmt;
use std::path::Path;

/// Failure of one command, carrying the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs that do not fit the model. Exit 1.
    Usage(String),
    /// A check ran and did not pass. Exit 2.
    Verification(String),
    /// Reading or writing a file failed. Exit 3.
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Verification(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dptrack::Error> for CliError {
    fn from(e: dptrack::Error) -> Self {
        use dptrack::Error as E;
        match e {
            E::Io(_) | E::Json(_) | E::Ppm(_) | E::Annotation { .. } | E::Checkpoint(_) => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}
