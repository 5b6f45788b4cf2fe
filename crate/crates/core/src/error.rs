use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A time argument (or pair) fell outside the region where the closed forms are defined.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("invalid mixture: {0}")]
    Mixture(String),

    #[error("non-finite gradient; parameters left untouched")]
    NonFiniteGradient,

    #[error("forward record is stale or missing: {0}")]
    StaleRecord(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown {family} '{name}' (known: {known})")]
    UnknownStrategy {
        family: &'static str,
        name: String,
        known: String,
    },

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("group too small: need at least 2 samples, got {0}")]
    GroupTooSmall(usize),

    #[error("s-rule produced s={s} for t={t}; need 0 <= s < t")]
    SRuleViolation { s: f64, t: f64 },

    #[error("{0}")]
    MissingTrajectory(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimMismatch { op, expected, got });
    }
    Ok(())
}
