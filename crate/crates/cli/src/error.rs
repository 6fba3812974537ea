use std::fmt;
use std::path::Path;

/// Exit code for invalid input or configuration.
pub const EXIT_INVALID: i32 = 1;
/// Exit code for a missing prerequisite artifact.
pub const EXIT_MISSING: i32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }

    pub fn missing(path: &Path) -> Self {
        CliError {
            code: EXIT_MISSING,
            message: format!("missing prerequisite: {}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<cinfer::Error> for CliError {
    fn from(e: cinfer::Error) -> Self {
        CliError::invalid(e.to_string())
    }
}
