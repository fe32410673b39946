use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("incompatible checkpoints: {0}")]
    IncompatibleCheckpoints(String),

    #[error("numerical error at {context}: {message}")]
    Numerical { context: String, message: String },

    #[error("descent diverged after {iteration} iterations (loss {loss}); try a smaller learning rate")]
    Divergence { iteration: usize, loss: f64 },

    #[error("undefined: {0}")]
    Undefined(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numerical(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Prefix the error's context with `ctx` (task index, layer name, ...).
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::InvalidInput(m) => Error::InvalidInput(format!("{ctx}: {m}")),
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{ctx}: {m}")),
            Error::IncompatibleCheckpoints(m) => Error::IncompatibleCheckpoints(format!("{ctx}: {m}")),
            Error::Numerical { context, message } => Error::Numerical {
                context: format!("{ctx}, {context}"),
                message,
            },
            Error::Divergence { iteration, loss } => Error::Numerical {
                context: ctx.to_string(),
                message: format!("descent diverged at iteration {iteration} (loss {loss})"),
            },
            other => other,
        }
    }
}
