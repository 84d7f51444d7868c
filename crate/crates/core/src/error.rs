use thiserror::Error;

/// Errors raised by the numerical modules.
///
/// Each variant names the failing module/operation so the CLI can map it onto
/// its exit-code contract (configuration problems vs numerical failures).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("return time exceeded cap {cap} in {op}")]
    Overflow { op: &'static str, cap: u64 },

    #[error("orbit escaped tower truncation (height {height}) in {op}")]
    Truncation { op: &'static str, height: usize },

    #[error("cylinder depth {needed} exceeds available depth {available} in {op}")]
    Depth {
        op: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("index {index} out of range (max {max}) in {op}")]
    Range { op: &'static str, index: usize, max: usize },

    #[error("precondition violated in {op}: {msg}")]
    Precondition { op: &'static str, msg: String },

    #[error("no convergence in {op} after {iterations} iterations (residual {residual:e})")]
    Convergence {
        op: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("fit failed in {op}: {msg}")]
    Fit { op: &'static str, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain { op, msg: msg.into() }
    }

    pub(crate) fn precondition(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Precondition { op, msg: msg.into() }
    }

    /// True for errors caused by user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Io(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
