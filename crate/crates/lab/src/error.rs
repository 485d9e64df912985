use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// One invariant violation in a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl FieldError {
    pub fn new(field: &str, message: String) -> Self {
        FieldError { field: field.to_string(), line: None, message }
    }

    /// Maps a core error onto a config field, keeping the core field name as a suffix.
    pub fn from_core(prefix: &str, err: &dsa_core::Error) -> Self {
        match err {
            dsa_core::Error::Config { field, message } => {
                let base = field.split('[').next().unwrap_or(field);
                FieldError::new(&format!("{prefix}.{base}"), format!("{field}: {message}"))
            }
            other => FieldError::new(prefix, other.to_string()),
        }
    }

    pub(crate) fn locate(mut self, source: &str) -> Self {
        self.line = crate::config::locate_field(source, &self.field);
        self
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{}", match line { Some(l) => format!("parse error at line {l}: {message}"), None => format!("parse error: {message}") })]
    Parse { line: Option<usize>, message: String },
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Threads(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }
}
