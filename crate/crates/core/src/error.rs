use std::io;
use std::path::PathBuf;

use crate::hash::Digest;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid chunking parameters: {0}")]
    ChunkParams(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error("missing chunk {0}")]
    MissingChunk(Digest),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("corrupt repository data: {0}")]
    Corruption(String),

    #[error("{0}")]
    Concurrency(String),

    #[error("concurrent update of {what}; retry")]
    Conflict { what: String },

    #[error("{0}")]
    PermissionDenied(String),

    #[error("tree is identical to parent {0}")]
    EmptyCommit(Digest),

    #[error("{0}")]
    Validation(String),

    #[error("{kind} not found: {name}")]
    NotFound { kind: &'static str, name: String },

    #[error("query matched no commits")]
    NoMatch,

    #[error("query matched {0} commits")]
    AmbiguousQuery(usize),

    #[error("ambiguous id prefix {0}")]
    AmbiguousId(String),

    #[error("commit {0} has been revoked")]
    RevokedData(Digest),

    #[error("workflow contains a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("{0}")]
    WrongState(String),

    #[error("not a repository (no .dsr directory found from {0})")]
    NoRepository(PathBuf),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn not_found(kind: &'static str, name: impl Into<String>) -> Self {
        Error::NotFound {
            kind,
            name: name.into(),
        }
    }

    /// Stable machine-readable code used on the command line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ChunkParams(_) => "PARAMS",
            Error::Io { .. } => "IO",
            Error::MissingChunk(_) | Error::Corruption(_) => "CORRUPTION",
            Error::Integrity(_) => "INTEGRITY",
            Error::Concurrency(_) => "LOCKED",
            Error::Conflict { .. } => "CONFLICT",
            Error::PermissionDenied(_) => "PERMISSION_DENIED",
            Error::EmptyCommit(_) => "EMPTY_COMMIT",
            Error::Validation(_) => "VALIDATION",
            Error::NotFound { .. } => "NOT_FOUND",
            Error::NoMatch => "NO_MATCH",
            Error::AmbiguousQuery(_) => "AMBIGUOUS_QUERY",
            Error::AmbiguousId(_) => "AMBIGUOUS_ID",
            Error::RevokedData(_) => "REVOKED_DATA",
            Error::Cycle(_) => "CYCLE",
            Error::WrongState(_) => "WRONG_STATE",
            Error::NoRepository(_) => "NO_REPOSITORY",
            Error::Json(_) => "CORRUPTION",
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Conflict { .. })
    }
}

pub(crate) trait IoContext<T> {
    fn ctx(self, f: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn ctx(self, f: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::io(f(), e))
    }
}
