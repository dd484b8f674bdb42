use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use ddnm_core::Error as CoreError;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INCOMPATIBLE: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(CoreError),
    Io {
        path: PathBuf,
        message: String,
    },
    /// Replay produced different bytes.
    Mismatch(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, err: impl fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Mismatch(_) => EXIT_NUMERIC,
            CliError::Core(e) => match e {
                CoreError::InvalidParameter(_) | CoreError::Spec { .. } | CoreError::EmptyTensor(_) => EXIT_USAGE,
                CoreError::Incompatible(_)
                | CoreError::LengthMismatch { .. }
                | CoreError::DimensionMismatch { .. }
                | CoreError::SizeLimit { .. } => EXIT_INCOMPATIBLE,
                CoreError::Io { .. } | CoreError::Parse { .. } => EXIT_IO,
                CoreError::NonFinite(_)
                | CoreError::NonConvergence { .. }
                | CoreError::Domain(_)
                | CoreError::LowEffectiveSampleSize { .. }
                | CoreError::External(_) => EXIT_NUMERIC,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, message } => write!(f, "{}: {message}", path.display()),
            CliError::Mismatch(m) => write!(f, "replay mismatch: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
