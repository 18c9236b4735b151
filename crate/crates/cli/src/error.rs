use std::process::ExitCode;

use marginlab::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("path error: {0}")]
    Path(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Path(_) => 3,
            CliError::Numerical(_) => 4,
        })
    }

    /// Wraps a library error raised while reading or writing `what`.
    pub fn at(what: impl std::fmt::Display) -> impl FnOnce(Error) -> CliError {
        move |e| match CliError::from(e) {
            CliError::Path(msg) => CliError::Path(format!("{what}: {msg}")),
            other => other,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Config(msg),
            Error::Shape(_) => CliError::Config(e.to_string()),
            Error::Io(_)
            | Error::Parse { .. }
            | Error::Dimension { .. }
            | Error::Lookup(_)
            | Error::NonUnitRow { .. } => CliError::Path(e.to_string()),
            Error::Degenerate(_) | Error::NonFinite(_) | Error::NonFiniteLoss { .. } => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}
