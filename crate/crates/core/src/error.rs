use thiserror::Error;

pub type Result<T> = std::result::Result<T, PidError>;

#[derive(Debug, Error)]
pub enum PidError {
    /// Malformed arguments: wrong lengths, non-finite values.
    #[error("input error: {0}")]
    Input(String),

    /// Query outside the region where the math is defined (e.g. t <= 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration value, reported with its dotted field path.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PidError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        PidError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the CLI: 2 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PidError::Numerical { .. } | PidError::NonFinite(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(PidError::Input(format!(
            "{what}: expected length {expected}, got {got}"
        )));
    }
    Ok(())
}

pub(crate) fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
        return Err(PidError::Input(format!(
            "{what}: non-finite entry at index {pos}"
        )));
    }
    Ok(())
}
