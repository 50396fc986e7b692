//! CLI error wrapper that fixes the process exit contract:
//! 0 success, 2 usage error, 3 data error, 4 numerical abort.

use cohort_norm::error::Error;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config keys, incompatible method/bank combinations.
    Usage(String),
    /// Malformed or mismatched input files detected by the CLI itself.
    Data(String),
    /// Anything surfaced by the core library; the exit code depends on
    /// the variant.
    Core(Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                // Parameter problems the user fixes by changing flags.
                Error::InvalidConfig(_)
                | Error::InvalidCohortSize { .. }
                | Error::NegativeMargin(_)
                | Error::SubCentersUnsupported { .. } => 2,
                Error::NonFinite { .. } => 4,
                _ => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}
