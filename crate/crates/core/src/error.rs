use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in input to {op} (strict mode)")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid label space: {0}")]
    LabelSpace(String),

    #[error("memory bank: {0}")]
    Memory(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("sample file {path}: {kind}")]
    SampleFile { path: PathBuf, kind: SampleFileError },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("category mismatch: {0}")]
    CategoryMismatch(String),

    #[error("lineage: {0}")]
    Lineage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("no completed runs: {0}")]
    NoRuns(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

/// Distinct diagnostics for the binary sample format.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleFileError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated payload")]
    Truncated,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} not in annotated set")]
    LabelNotAnnotated { label: u8 },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated file")]
    Truncated,
    #[error("checksum mismatch (header {expected}, payload {actual})")]
    Checksum { expected: String, actual: String },
    #[error("malformed: {0}")]
    Malformed(String),
}
