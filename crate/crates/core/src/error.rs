use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),

    #[error("degenerate embedding: row {row} has norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("non-finite value while evaluating {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("modality '{name}' is not registered (registered: {known:?})")]
    UnknownModality { name: String, known: Vec<String> },

    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("'{0}' is not in the vocabulary")]
    Vocabulary(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupted file at byte offset {offset}: {reason}")]
    Corruption { offset: usize, reason: String },

    #[error("incompatible version {found} (expected {expected})")]
    Incompatible { found: u16, expected: u16 },

    #[error("training diverged at step {step} (tau = {tau})")]
    Divergence { step: usize, tau: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("modality '{0}' is already aligned")]
    Duplicate(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
