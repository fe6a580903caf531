use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // embedding file
    #[error("missing or invalid header line")]
    MissingHeader,
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("line {0}: non-finite vector component")]
    NonFiniteComponent(usize),
    #[error("line {0}: malformed record")]
    MalformedLine(usize),
    #[error("header declares {declared} records, file has {found}")]
    CountMismatch { declared: usize, found: usize },

    // episodes
    #[error("not enough classes: need {needed}, have {available}")]
    NotEnoughClasses { needed: usize, available: usize },
    #[error("class {label:?} has {available} records, episode needs {needed}")]
    NotEnoughSamples {
        label: String,
        needed: usize,
        available: usize,
    },
    #[error("unknown class label {0:?}")]
    UnknownLabel(String),

    // math
    #[error("vector length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("class {0} has no members")]
    EmptyClass(usize),
    #[error("support set is empty")]
    EmptySupport,
    #[error("no query neighbors available")]
    EmptyNeighbors,
    #[error("covariance could not be factorized after jitter escalation (last jitter {jitter:e})")]
    NotFactorizable { jitter: f64 },
    #[error("generated set covers {found} classes, support has {expected}")]
    MissingClass { expected: usize, found: usize },
    #[error("non-finite loss at episode {episode}: basic={l_basic} gen={l_gen}")]
    NonFiniteLoss { episode: usize, l_basic: f64, l_gen: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical pipeline, as opposed to bad input or
    /// configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::NotFactorizable { .. })
    }
}
