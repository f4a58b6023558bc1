use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not agree.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller-supplied parameter is out of range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A precondition on values (not shapes) was violated.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("exact RIP enumeration refused: C({n}, {order}) = {count} support sets exceeds cap {cap}")]
    EnumerationCap {
        n: usize,
        order: usize,
        count: u128,
        cap: u128,
    },

    #[error("non-finite value in tensor '{0}'")]
    NonFinite(String),

    #[error("checksum mismatch for {}", .0.display())]
    Checksum(PathBuf),

    #[error("load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn shapes(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Error::Dimension {
            op,
            detail: format!("incompatible shapes {a:?} and {b:?}"),
        }
    }
}
