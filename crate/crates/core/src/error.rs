use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("corpus contains no notes")]
    EmptyCorpus,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("title space needs at least 2 distinct titles, found {0}")]
    InsufficientTitles(usize),
    #[error("unknown prototype title {0:?}")]
    UnknownTitle(String),
    #[error("unknown similarity category {0:?}")]
    UnknownCategory(String),
    #[error("requested dimension {dim} exceeds {what} ({available})")]
    DimTooLarge {
        dim: usize,
        what: &'static str,
        available: usize,
    },
    #[error("dimension mismatch for {key}: expected {expected}, found {found}")]
    DimMismatch {
        key: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite or zero vector for {0}")]
    BadVector(String),
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("no imported embedding for patient {patient_id} note {note_index}")]
    MissingEmbedding {
        patient_id: String,
        note_index: usize,
    },
    #[error("need at least 2 patients, got {0}")]
    TooFewPatients(usize),
    #[error("format error: {0}")]
    Format(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sequence too short: need at least 2 elements, got {0}")]
    TooShort(usize),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
