use std::path::PathBuf;

use crate::ontology::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid ontology: {0}")]
    InvalidOntology(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("unknown class id {0}")]
    UnknownClassId(u32),

    #[error("task index {t} out of range (sequence has tasks {lo}..={hi})")]
    TaskOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("sequence failed validation with {} violation(s); first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    InvalidSequence(Vec<Violation>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("degenerate architecture: {0}")]
    DegenerateArchitecture(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset for task {0}")]
    EmptyDataset(usize),

    #[error("teacher outputs required when distilling at task {0}")]
    MissingTeacher(usize),

    #[error("inseparable configuration: {0}")]
    Inseparable(String),

    #[error("unsatisfiable region constraints: {0}")]
    Unsatisfiable(String),

    #[error("non-finite loss at task {task}, epoch {epoch}")]
    NonFinite { task: usize, epoch: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 4,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Data(_)
            | Error::EmptyDataset(_)
            | Error::DimensionMismatch { .. }
            | Error::Csv(_) => 3,
            _ => 2,
        }
    }
}
