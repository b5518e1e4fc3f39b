use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown language tag `{0}`")]
    UnknownLanguage(String),

    #[error("{path}:{line}: {msg}")]
    Corpus {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("loss diverged (non-finite value {value}) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize, value: f64 },

    #[error("checkpoint fingerprint mismatch: file has {found}, config expects {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("checkpoint checksum mismatch; file is corrupt or truncated")]
    Checksum,

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("memory bank `{0}` is not present in this model")]
    MissingBank(String),

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
}
