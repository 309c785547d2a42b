use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not compose; `detail` names the offending axes.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("graph structure error: {0}")]
    Structure(String),

    #[error("state error: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("size budget exceeded: {what} needs {actual}, limit is {limit}")]
    Size {
        what: &'static str,
        actual: usize,
        limit: usize,
    },

    #[error("non-finite objective in unit {unit} at step {step}")]
    NonFinite { unit: usize, step: usize },

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("blob length mismatch for tensor `{tensor}`: manifest needs {expected} bytes, blob has {actual}")]
    BlobLength {
        tensor: String,
        expected: usize,
        actual: usize,
    },

    #[error("unknown layer kind `{kind}` (supported: {supported})")]
    UnknownLayerKind { kind: String, supported: String },

    #[error("cannot read dataset file {}: {source}", path.display())]
    DatasetMissing {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad IDX magic in {}: expected {expected:#010x}, found {found:#010x}", path.display())]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated IDX payload in {}: expected {expected} bytes, found {actual}", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
