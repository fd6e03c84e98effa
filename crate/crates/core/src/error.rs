use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: length mismatch ({left} vs {right})")]
    Length {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("architecture mismatch: {0} vs {1}")]
    ArchMismatch(String, String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "Dirichlet cutoff rejection budget exhausted after {attempts} attempts \
         (q={q}, kappa={kappa}, tau={tau}); try a smaller tau or the gibbs cutoff sampler"
    )]
    RejectionBudget {
        attempts: usize,
        q: usize,
        kappa: f64,
        tau: f64,
    },

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("verifier requires the codebook and trigger set: {} not found", .0.display())]
    MissingSecret(PathBuf),

    #[error("label oracle failed: {0}")]
    Oracle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}

/// Process exit codes used by the command-line front end.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const MISSING_ARTIFACT: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::RejectionBudget { .. } => exit::CONFIG,
            Error::MissingArtifact(_) | Error::MissingSecret(_) => exit::MISSING_ARTIFACT,
            Error::NonFinite(_) => exit::NUMERICAL,
            _ => exit::OTHER,
        }
    }
}
