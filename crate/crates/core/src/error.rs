use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::fingerprint::Fingerprint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification of provider failures, used by the retry policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    RateLimited,
    ServerError,
    Network,
    Auth,
    BadRequest,
    BadResponse,
}

impl ErrorClass {
    pub fn is_retryable(self) -> bool {
        matches!(
            self,
            ErrorClass::RateLimited | ErrorClass::ServerError | ErrorClass::Network
        )
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("another live session holds the lock on {0}")]
    LockHeld(PathBuf),
    #[error("session folder uses format version {found}, this engine supports up to {supported}")]
    IncompatibleFormat { found: u32, supported: u32 },
    #[error("{0} is not a session folder")]
    NotASession(PathBuf),
    #[error("session at {0} is locked by a live process")]
    SessionLocked(PathBuf),
    #[error("session is closed")]
    SessionClosed,
    #[error("step name is empty after normalization")]
    EmptyName,
    #[error("step name `{0}` is already in use")]
    NameConflict(String),
    #[error("no step or trainer named `{0}`")]
    UnknownNode(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("cannot derive a schema from an empty list of datasets")]
    EmptySchema,
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("canonical value exceeds nesting depth {0}")]
    DepthExceeded(usize),
    #[error("content hash mismatch in {path}: expected {expected}, found {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
    #[error("step `{name}` failed: {source}")]
    StepFailed {
        name: String,
        #[source]
        source: Box<Error>,
    },
    #[error("step `{0}` runs callback logic and needs a logic_key to be cacheable")]
    UncacheableWithoutLogicKey(String),
    #[error("input `{0}` is not completed")]
    InputNotReady(String),
    #[error("`{0}` is not completed")]
    NotCompleted(String),
    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),
    #[error("few-shot prompting needs at least one example")]
    MissingExamples,
    #[error("replay mode: no cached result for key {0}")]
    ReplayMiss(Fingerprint),
    #[error("provider `{provider}` failed ({class:?}): {message}")]
    Provider {
        provider: String,
        class: ErrorClass,
        message: String,
    },
    #[error("environment variable `{0}` with the API key is not set")]
    AuthMissing(String),
    #[error("no provider registered under `{0}`")]
    UnknownProvider(String),
    #[error("no trainer registered under `{0}`")]
    UnknownTrainer(String),
    #[error("model transport is disabled")]
    TransportDisabled,
    #[error("invalid model reference: {0}")]
    InvalidModel(String),
    #[error("user logic panicked: {0}")]
    Panicked(String),
    #[error("trainer failed: {0}")]
    TrainerFailed(String),
    #[error("checkpoint was written for dataset {found}, training input is {expected}")]
    CheckpointMismatch {
        expected: Fingerprint,
        found: Fingerprint,
    },
    #[error("ancestor {0} is missing from the session folder")]
    IncompleteAncestry(Fingerprint),
    #[error("prompt cache: {0}")]
    Cache(#[from] rusqlite::Error),
}

impl Error {
    pub(crate) fn malformed(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Malformed {
            what: what.into(),
            detail: detail.to_string(),
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
