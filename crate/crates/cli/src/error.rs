use std::fmt;

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration values.
    Usage(String),
    Core(mergeforge::Error),
    /// Bound checks found violations; the message is the worst-margin report.
    Violations(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use mergeforge::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Violations(_) => 5,
            CliError::Core(e) => match e {
                E::InvalidInput(_) | E::InvalidConfig(_) => 2,
                E::Format(_) | E::CorruptFile(_) | E::Io { .. } | E::IncompatibleCheckpoints(_) => 3,
                E::Numerical { .. } | E::Divergence { .. } | E::Undefined(_) => 4,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Violations(m) => write!(f, "{m}"),
        }
    }
}

impl From<mergeforge::Error> for CliError {
    fn from(e: mergeforge::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
