use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Backend,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("{0}: no records")]
    NoRecords(String),

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("class {class:?} has {available} examples, need at least {needed}")]
    NotEnoughExamples {
        class: String,
        available: usize,
        needed: usize,
    },

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("arity mismatch: template expects {expected} fields, example has {actual}")]
    ArityMismatch { expected: usize, actual: usize },

    #[error("invalid label mapping: {0}")]
    InvalidMapping(String),

    #[error("label sequence must be non-empty")]
    EmptyLabelSequence,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidTokenId { id: usize, size: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("backend {0} is not trainable")]
    NotTrainable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("search error: {0}")]
    Search(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("protocol version mismatch: client speaks {client}, server speaks {server}")]
    VersionMismatch { client: String, server: String },

    #[error("server error: {0}")]
    Server(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Stage { source, .. } => source.kind(),
            Error::Parse { .. }
            | Error::NoRecords(_)
            | Error::InvalidExample(_)
            | Error::NotEnoughExamples { .. }
            | Error::InvalidTask(_)
            | Error::ArityMismatch { .. }
            | Error::InvalidMapping(_)
            | Error::UnknownToken(_)
            | Error::Io { .. }
            | Error::Json(_) => ErrorKind::Data,
            Error::Template(_) | Error::Config(_) => ErrorKind::Usage,
            Error::Transport(_)
            | Error::Protocol(_)
            | Error::VersionMismatch { .. }
            | Error::Server(_)
            | Error::NotTrainable(_)
            | Error::Model(_)
            | Error::Checkpoint(_) => ErrorKind::Backend,
            Error::EmptyLabelSequence
            | Error::InvalidTokenId { .. }
            | Error::InvalidVocab(_)
            | Error::Metric(_)
            | Error::Search(_) => ErrorKind::Internal,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
