use std::fmt;
use std::path::PathBuf;

use capiset::geometry::GeometryError;
use capiset::Error;

/// Every failure the binary reports; the prefix of each message names its kind.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    /// An artifact was written but its check failed (e.g. Lyapunov violations).
    Check(String),
    Core(Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Core(Error::Geometry(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl CliError {
    /// 1 for invalid inputs and failed checks, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }

    pub fn prefix(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "error[usage]",
            CliError::File { .. } => "error[file]",
            CliError::Check(_) => "error[check]",
            CliError::Core(e) => match e {
                Error::Schema(_) | Error::Json(_) => "error[schema]",
                Error::Io(_) => "error[file]",
                Error::InfeasibleReference { .. } => "error[reference]",
                Error::ConstraintViolated { .. } => "error[constraint]",
                Error::Unverified { .. } => "error[unverified]",
                Error::TrainingFailed(_) => "error[training]",
                _ if e.is_numerical() => "error[numerical]",
                _ => "error[input]",
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => write!(f, "{}: {m}", self.prefix()),
            CliError::File { path, source } => write!(f, "{}: {}: {source}", self.prefix(), path.display()),
            CliError::Core(Error::Schema(m)) => write!(f, "{}: {m}", self.prefix()),
            CliError::Core(e) => write!(f, "{}: {e}", self.prefix()),
        }
    }
}
