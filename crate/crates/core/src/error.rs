use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid span {start}..{end} for sequence of length {len}")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("no replacement for {0}")]
    NoReplacement(String),
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),
    #[error("invalid scene `{id}`: {reason}")]
    InvalidScene { id: String, reason: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("record `{id}` failed validation: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("record has no phrase pairs")]
    NoPairs,
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot([usize; 2]),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("vocabulary mismatch: {0} vs {1}")]
    VocabMismatch(usize, usize),
    #[error("non-finite loss at step {step} (record `{record}`)")]
    NonFiniteLoss { step: usize, record: String },
    #[error("LLM endpoint unavailable after {attempts} attempt(s): {message}")]
    EndpointUnavailable { attempts: usize, message: String },
    #[error("LLM completion rejected: {0}")]
    CompletionRejected(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Whether retrying the same operation may succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::EndpointUnavailable { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
