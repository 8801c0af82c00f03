use std::path::PathBuf;

/// Every failure the lab can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("cannot ingest {}: {msg}", path.display())]
    Ingest { path: PathBuf, msg: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("numerical abort at step {step}: {msg}")]
    NumericalAbort { step: usize, msg: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code for the command-line front end:
    /// 1 usage/config, 2 IO, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. }
            | Error::Contract(_)
            | Error::Config(_)
            | Error::IncompatibleCheckpoint(_)
            | Error::Usage(_) => 1,
            Error::CorruptCheckpoint(_)
            | Error::Ingest { .. }
            | Error::EmptyDataset(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::NonFinite(_) | Error::NumericalAbort { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
