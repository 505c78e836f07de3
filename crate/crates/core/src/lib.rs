//! Joint learning of directed network structure and stochastic population
//! dynamics from timestamped snapshot samples.
//!
//! The library couples adjacent empirical marginals with entropic optimal
//! transport, regresses a masked graphical drift and a conditional score
//! network onto closed-form Brownian-bridge targets, and reads the inferred
//! graph off the drift network's first-layer row norms. Evaluation utilities
//! (distributional distances, ranking scores, rollout integrators), a linear
//! synthetic data generator, and an Ornstein-Uhlenbeck reference-fitting
//! baseline round out the experiment pipeline driven by the `sfk` binary.

pub mod baseline_ou;
pub mod bridge;
pub mod cli;
pub mod datagen;
pub mod eot;
pub mod metrics;
pub mod nets;
pub mod numerics;
pub mod rollout;
pub mod trainer;

use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum SfkError {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, SfkError>;

impl SfkError {
    pub(crate) fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        SfkError::Shape {
            context,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SfkError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Library version embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
