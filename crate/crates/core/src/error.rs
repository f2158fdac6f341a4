use std::path::Path;

/// Errors are split into two categories so the CLI can map them onto its
/// exit-code contract: validation problems (bad input data, malformed JSON,
/// inconsistent volumes) exit with 2, I/O failures with 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(msg.into())
    }

    /// Attach a file path to an I/O error so the single-line CLI message
    /// names the offending file.
    pub fn io_at(path: &Path, err: std::io::Error) -> Self {
        Error::Io(format!("{}: {}", path.display(), err))
    }

    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Io(_) => 3,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Validation(format!("malformed JSON: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
