use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The `Display` output is a single line of the form `<class>: <detail>` so
/// the CLI can print it verbatim as a machine-parseable reason.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract: {0}")]
    Contract(String),

    #[error("dimension: expected {expected} for {what}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("numerical: cholesky of local gram for block {block} failed after jitter {jitter:e}")]
    Factorization { block: usize, jitter: f64 },

    #[error("numerical: {0}")]
    Numerical(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data: missing file {0}")]
    MissingFile(PathBuf),

    #[error("data: empty file {0}")]
    EmptyFile(PathBuf),

    #[error("data: non-numeric cell {value:?} at row {row}, column {column:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("data: target column {0:?} not found")]
    MissingColumn(String),

    #[error("data: {0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("model: version mismatch (found {found}, expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("model: {0}")]
    Model(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Dimension { .. } | Error::Config(_) => 2,
            Error::Factorization { .. } | Error::Numerical(_) => 4,
            Error::Io { .. }
            | Error::MissingFile(_)
            | Error::EmptyFile(_)
            | Error::NonNumeric { .. }
            | Error::MissingColumn(_)
            | Error::Data(_)
            | Error::VersionMismatch { .. }
            | Error::Model(_) => 3,
        }
    }
}

pub(crate) fn ensure_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::dim(what, expected, got))
    }
}
