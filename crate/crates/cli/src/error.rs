use obliq_core::SolverError;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error{}: {message}", if field.is_empty() { String::new() } else { format!(" at `{field}`") })]
    Config { field: String, message: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        CliError::Config { field: field.to_string(), message: message.into() }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io(_) => "io",
            CliError::Solver(_) => "solver",
            CliError::Output(_) => "output",
        }
    }

    /// Structured form written to `summary.json` and stderr.
    pub fn to_report(&self) -> ErrorReport {
        ErrorReport {
            kind: self.kind().to_string(),
            field: match self {
                CliError::Config { field, .. } if !field.is_empty() => Some(field.clone()),
                _ => None,
            },
            message: self.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}
