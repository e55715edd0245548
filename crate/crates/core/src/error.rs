use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for CLI exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input: malformed files, inconsistent dimensions, invalid flags.
    Validation,
    /// The inputs were well formed but the numerics failed.
    Numerical,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}, expected \"IDM1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("truncated or oversized matrix file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },
    #[error("empty matrix ({rows}x{cols})")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("row {row} is zero and cannot be normalized")]
    ZeroRow { row: usize },
    #[error("index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: u64, rows: usize },
    #[error("duplicate index {0}")]
    DuplicateIndex(u64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("matrix not symmetric: |a[{row},{col}] - a[{col},{row}]| = {gap:e}")]
    Asymmetric { row: usize, col: usize, gap: f64 },
    #[error("negative second moment v[{index}] = {value}")]
    NegativeMoment { index: usize, value: f64 },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("active-set solver exceeded {cap} iterations (cycling between supports of size {last_support})")]
    IterationCap { cap: usize, last_support: usize },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::Singular(_) | Error::NotPositiveDefinite(_) | Error::IterationCap { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }
}
