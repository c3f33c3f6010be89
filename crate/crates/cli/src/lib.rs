//! Command-line driver for the `memforce` engine.

pub mod config;
pub mod output;
pub mod run;

/// Failures mapped onto the process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid config:{}", list(.0))]
    Invalid(Vec<(String, String)>),
    #[error("solver failure (config {fingerprint}): {message}")]
    Solver { fingerprint: String, message: String },
    #[error("{0} verification checks failed")]
    Verification(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn list(v: &[(String, String)]) -> String {
    v.iter().map(|(f, r)| format!("\n  {f}: {r}")).collect()
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) => 1,
            CliError::Solver { .. } | CliError::Io { .. } => 2,
            CliError::Verification(_) => 3,
        }
    }

    pub(crate) fn solver(fingerprint: &str, e: impl std::fmt::Display) -> Self {
        CliError::Solver {
            fingerprint: fingerprint.to_string(),
            message: e.to_string(),
        }
    }
}
