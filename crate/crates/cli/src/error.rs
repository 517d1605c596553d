//! Failure classes and their exit codes.

use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Data(String),
    Divergence(String),
    Internal(String),
}

#[derive(Serialize)]
struct Report<'a> {
    error: &'a str,
    code: u8,
    message: &'a str,
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
            CliError::Divergence(_) => 5,
            CliError::Internal(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Divergence(_) => "divergence",
            CliError::Internal(_) => "internal",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Data(m) | CliError::Divergence(m) | CliError::Internal(m) => m,
        }
    }

    /// One JSON object on a single line.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&Report {
            error: self.kind(),
            code: self.code(),
            message: self.message(),
        })
        .expect("error report serializes")
    }
}

impl From<ctxfuse::Error> for CliError {
    fn from(e: ctxfuse::Error) -> Self {
        use ctxfuse::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) => CliError::Config(msg),
            E::Parse { .. } | E::Record { .. } | E::Io { .. } | E::Checkpoint(_) => CliError::Data(msg),
            E::Divergence { .. } | E::NonFinite { .. } => CliError::Divergence(msg),
            _ => CliError::Internal(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
