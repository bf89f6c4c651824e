use thiserror::Error;

/// Errors surfaced by the engine, grouped by how a caller should react.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is invalid or inconsistent (bad dims, bad ranges).
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called out of order or with stale state (e.g. a tape from an
    /// older network version).
    #[error("usage error: {0}")]
    Usage(String),

    /// Stored or loaded bytes are inconsistent (bad magic, out-of-range codes).
    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value was produced where the math requires finite ones.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable process exit code per category, used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Usage(_) => 4,
            Error::NonFinite(_) => 5,
            Error::Io(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
