use std::path::PathBuf;

/// Unified error type. `exit_code` groups variants into the three failure
/// classes the CLI reports: bad configuration (2), numeric breakdown (3),
/// and I/O or on-disk format trouble (4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite values detected in {0}")]
    NonFinite(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: unsupported format version {found} (this build reads version {expected})")]
    FormatVersion {
        path: PathBuf,
        found: String,
        expected: u32,
    },

    #[error("{path}: blob `{blob}` failed its checksum")]
    Checksum { path: PathBuf, blob: String },

    #[error("{path}: blob `{blob}` truncated: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        blob: String,
        expected: u64,
        found: u64,
    },

    #[error("{path}: malformed manifest: {detail}")]
    Manifest { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 numeric, 4 I/O and format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. } | Error::Config(_) => 2,
            Error::NonFinite(_) | Error::Numeric(_) => 3,
            Error::Io { .. }
            | Error::FormatVersion { .. }
            | Error::Checksum { .. }
            | Error::Truncated { .. }
            | Error::Manifest { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
