use std::path::PathBuf;

pub type Result<T, E = DdtError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum DdtError {
    #[error(transparent)]
    Core(#[from] ddt_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: format error at byte {offset}: {reason}", path.display())]
    Format { path: PathBuf, offset: u64, reason: String },

    #[error("{}: schema version {found} is not supported (expected {expected})", path.display())]
    Version { path: PathBuf, found: u32, expected: u32 },

    #[error("{}: metadata: {reason}", path.display())]
    Metadata { path: PathBuf, reason: String },

    #[error("{}: cannot load image: {reason}", path.display())]
    Image { path: PathBuf, reason: String },

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },
}

impl DdtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DdtError::Io { path: path.into(), source }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DdtError::Config { field: field.into(), reason: reason.into() }
    }

    /// Process exit status: 3 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            DdtError::Config { .. } | DdtError::Core(ddt_core::Error::Config { .. }) => 3,
            _ => 1,
        }
    }
}

/// A decoding failure located at a byte offset, before a path is attached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormatError {
    pub offset: u64,
    pub reason: String,
}

impl FormatError {
    pub fn new(offset: impl TryInto<u64>, reason: impl Into<String>) -> Self {
        Self { offset: offset.try_into().unwrap_or(u64::MAX), reason: reason.into() }
    }

    pub fn at(self, path: impl Into<PathBuf>) -> DdtError {
        DdtError::Format { path: path.into(), offset: self.offset, reason: self.reason }
    }
}

impl std::fmt::Display for FormatError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "format error at byte {}: {}", self.offset, self.reason)
    }
}

impl std::error::Error for FormatError {}
