//! Error types shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Environment or feature construction violated a structural requirement.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Policy rows must be probability distributions over actions.
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    /// An operation was called outside its contract (e.g. stepping from a
    /// terminal state, sampling from an empty buffer).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A linear system was too ill-conditioned to solve reliably.
    #[error("singular system in {context}: condition number {condition:.3e} exceeds 1e12")]
    Singular { context: &'static str, condition: f64 },

    /// No solution exists (e.g. undiscounted values on a non-terminating chain).
    #[error("no solution: {0}")]
    NoSolution(String),

    /// Learner parameters left the finite range.
    #[error("numeric overflow: {0}")]
    Overflow(String),

    /// The expected-update iteration diverged; the distance trace is attached.
    #[error("iteration diverged: distance reached {last:.3e} after {} steps", trace.len())]
    Divergence { trace: Vec<f64>, last: f64 },

    /// Effective rank is undefined for an all-zero matrix.
    #[error("effective rank undefined for an all-zero matrix")]
    UndefinedRank,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
