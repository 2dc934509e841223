use std::fmt;

/// Errors with a fixed exit code each.
#[derive(Debug)]
pub enum CliError {
    /// Bad command line.
    Usage(String),
    /// Invalid configuration; `key` is the dotted path of the offending entry.
    Config { key: String, message: String },
    /// An input file or directory does not exist or cannot be read.
    Missing(String),
    /// Anything failing while the command runs.
    Run(occpose::Error),
}

impl CliError {
    pub fn config(key: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            key: if key.is_empty() { "<root>".into() } else { key.to_string() },
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Missing(_) => 3,
            CliError::Run(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
            CliError::Missing(_) => "missing_input",
            CliError::Run(_) => "runtime",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Config { key, message } => write!(f, "invalid config key `{key}`: {message}"),
            CliError::Missing(m) => write!(f, "missing input: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<occpose::Error> for CliError {
    fn from(e: occpose::Error) -> Self {
        match e {
            occpose::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Missing(io.to_string()),
            other => CliError::Run(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::from(occpose::Error::Io(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Run(occpose::Error::Format(e.to_string()))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(occpose::Error::Json(e))
    }
}
