use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} in {path}: {detail}")]
    Parse {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: String, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(what: &'static str, path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Parse { what, path: path.into(), detail: detail.into() }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    /// Process exit code for the CLI: precondition failures (config,
    /// contract, parse, checkpoint mismatch) exit 2; I/O and numerical
    /// faults exit 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract { .. } | Error::Parse { .. } | Error::Checkpoint(_) => 2,
            _ => 3,
        }
    }
}
