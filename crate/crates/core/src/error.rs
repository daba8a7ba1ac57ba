//! Error type shared across the toolkit.

use thiserror::Error;

/// All failure modes surfaced by the library.
///
/// The `Display` form starts with a stable machine-parsable reason token
/// (`domain:`, `parse:`, `infeasible-bound:`, ...) so command-line callers
/// can emit one-line diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    /// Input violated a documented precondition (bad value, shape mismatch).
    #[error("domain: {0}")]
    Domain(String),
    /// A text input could not be parsed.
    #[error("parse: line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// A width bound has no finite solution for the requested parameters.
    #[error("infeasible-bound: {0}")]
    InfeasibleBound(String),
    /// Invalid or inconsistent run configuration.
    #[error("config: {0}")]
    Config(String),
    /// Checkpoint file is damaged or has an unsupported version.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
