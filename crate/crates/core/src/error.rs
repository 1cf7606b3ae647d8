use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the identification and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no equilibrium found: {0}")]
    NoEquilibrium(String),

    #[error("integration failed at t = {t}: {reason}")]
    IntegrationFailure { t: f64, reason: String },

    #[error("non-finite state encountered at step {step}")]
    NonFiniteState { step: usize },

    #[error("filter cutoff {cutoff_hz} Hz must lie in (0, {nyquist_hz}) Hz")]
    Cutoff { cutoff_hz: f64, nyquist_hz: f64 },

    #[error("trajectory too short: {0}")]
    TooShort(String),

    #[error("insufficient samples: found {found}, need at least {needed}")]
    InsufficientSamples { found: usize, needed: usize },

    #[error("deviation matrix is rank deficient (cond = {cond})")]
    RankDeficient { cond: f64 },

    #[error("error bound is unbounded: deviation matrix is rank deficient")]
    Unbounded,

    #[error("gradient tape missing: rollout was run without recording")]
    TapeMissing,

    #[error("training did not converge: {0}")]
    NonConvergence(String),

    #[error("model time step {model_dt} does not match requested {requested_dt}")]
    DtMismatch { model_dt: f64, requested_dt: f64 },

    #[error("eigenvalue iteration did not converge after {iterations} iterations")]
    ConvergenceFailure { iterations: usize },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
