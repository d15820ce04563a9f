use std::fmt;

use atwwm_core::Error;

/// Usage problems exit with 2, everything else with 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        CliError::Usage(msg.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e {
                Error::Config(_) => "usage",
                Error::Shape { .. } | Error::Autodiff(_) | Error::NonFiniteGradient { .. } => "numeric",
                Error::Input(_) | Error::Data { .. } => "input",
                Error::Checkpoint(_) => "checkpoint",
                Error::Io(_) => "io",
                Error::Json(_) => "json",
            },
        }
    }

    /// Single-line JSON object for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "message": self.to_string().replace('\n', " "),
        })
        .to_string()
    }
}

impl From<CliError> for Error {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Usage(msg) => Error::Config(msg),
            CliError::Core(e) => e,
        }
    }
}

/// Fails with a usage error when `path` does not exist.
pub fn require_file(path: &std::path::Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}
