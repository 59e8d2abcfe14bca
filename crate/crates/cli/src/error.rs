use std::fmt;

use gle_core::{ErrorCategory, GleError};

/// Failures of a CLI run, each mapped to an exit status and a tag.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Malformed TOML, unknown key or wrong type.
    Parse { line: Option<usize>, message: String },
    Io(String),
    /// Well-formed but unusable configuration.
    Config(String),
    /// The model or a parameter list fails a check.
    Validation { tag: &'static str, message: String },
    /// A numerical step failed after the inputs were accepted.
    Numerical { tag: String, message: String },
    Core(GleError),
}

impl From<GleError> for CliError {
    fn from(e: GleError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            CliError::Parse { .. } | CliError::Io(_) | CliError::Config(_) => ErrorCategory::Config,
            CliError::Validation { .. } => ErrorCategory::Validation,
            CliError::Numerical { .. } => ErrorCategory::Numerical,
            CliError::Core(e) => e.category(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            ErrorCategory::Config => 1,
            ErrorCategory::Validation => 2,
            ErrorCategory::Numerical => 3,
        }
    }

    pub fn tag(&self) -> &str {
        match self {
            CliError::Parse { .. } => "parse-error",
            CliError::Io(_) => "io",
            CliError::Config(_) => "config",
            CliError::Validation { tag, .. } => tag,
            CliError::Numerical { tag, .. } => tag,
            CliError::Core(e) => e.tag(),
        }
    }

    /// `gle: error category=<c> tag=<t> [line=<n>] message="<…>"` on one line.
    pub fn stderr_line(&self) -> String {
        let category = match self.category() {
            ErrorCategory::Config => "config",
            ErrorCategory::Validation => "validation",
            ErrorCategory::Numerical => "numerical",
        };
        let line = match self {
            CliError::Parse { line: Some(l), .. } => format!(" line={l}"),
            _ => String::new(),
        };
        let msg = self.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace(['\n', '\r'], " ");
        format!("gle: error category={category} tag={}{line} message=\"{msg}\"", self.tag())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Parse { message, .. } => write!(f, "{message}"),
            CliError::Io(m) | CliError::Config(m) => write!(f, "{m}"),
            CliError::Validation { message, .. } | CliError::Numerical { message, .. } => write!(f, "{message}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}
