use std::fmt;
use std::path::Path;

/// Exit code for bad invocations: unreadable inputs, invalid configuration.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running a command.
pub const EXIT_FAILURE: i32 = 1;

/// A command failure, reported as one JSON line on stderr.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: &'static str,
    pub detail: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn new(kind: &'static str, detail: impl Into<String>, exit_code: i32) -> Self {
        Self {
            kind,
            detail: detail.into(),
            exit_code,
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Self::new("config", detail, EXIT_USAGE)
    }

    /// A required input file could not be read.
    pub fn input(path: &Path, err: impl fmt::Display) -> Self {
        Self::new("input", format!("{}: {err}", path.display()), EXIT_USAGE)
    }

    pub fn output(path: &Path, err: impl fmt::Display) -> Self {
        Self::new("output", format!("{}: {err}", path.display()), EXIT_FAILURE)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind, "detail": self.detail }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.detail)
    }
}

impl std::error::Error for CliError {}

impl From<formgen_core::Error> for CliError {
    fn from(e: formgen_core::Error) -> Self {
        use formgen_core::Error as E;
        let code = match e {
            E::Config(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        let kind = match e {
            E::Config(_) => "config",
            E::Io { .. } => "io",
            E::Json(_) | E::Csv(_) | E::Parse { .. } | E::MissingColumn(_) => "parse",
            E::NonFiniteGradient(_) | E::NonFinite { .. } => "numeric",
            _ => "invalid",
        };
        // Details never span lines.
        let detail = e.to_string().replace('\n', " ");
        Self::new(kind, detail, code)
    }
}
