//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed Standard MIDI File data; `offset` is the byte position at
    /// which parsing failed.
    #[error("MIDI parse error at byte {offset}: {message}")]
    MidiParse { offset: usize, message: String },

    /// SMF format 2 (and anything beyond formats 0/1) is not supported.
    #[error("unsupported SMF format {0}")]
    UnsupportedSmfFormat(u16),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A note attribute fell outside its vocabulary during encoding.
    #[error("cannot encode note {note_index}: attribute `{attribute}` {message}")]
    Encoding {
        note_index: usize,
        attribute: &'static str,
        message: String,
    },

    /// A token index fell outside its vocabulary during decoding.
    #[error("cannot decode token {token_index}: attribute `{attribute}` index {index} out of range (vocab size {vocab_size})")]
    Decoding {
        token_index: usize,
        attribute: &'static str,
        index: u32,
        vocab_size: usize,
    },

    /// A per-track or per-bar note count exceeded the configured slot capacity.
    #[error("{group_kind} {group_index} holds {count} notes, exceeding capacity {capacity}")]
    Capacity {
        group_kind: &'static str,
        group_index: usize,
        count: usize,
        capacity: usize,
    },

    /// An instrument could not be mapped to a track slot.
    #[error("instrument mapping error: {0}")]
    InstrumentMapping(String),

    /// Mismatched shapes or misused API between components.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration, including unknown config keys.
    #[error("config error: {0}")]
    Config(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    /// Checkpoint/corpus vocabulary fingerprints disagree.
    #[error("vocabulary mismatch: checkpoint fingerprint {checkpoint} != corpus fingerprint {corpus}")]
    VocabMismatch { checkpoint: String, corpus: String },

    /// Corrupt or incompatible checkpoint container.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step} (batch {batch_id}): {detail}")]
    NonFiniteLoss {
        step: usize,
        batch_id: String,
        detail: String,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code per error class, documented in the CLI help.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Io { .. } => 4,
            Error::MidiParse { .. }
            | Error::UnsupportedSmfFormat(_)
            | Error::Json(_)
            | Error::Checkpoint(_) => 5,
            Error::Encoding { .. }
            | Error::Decoding { .. }
            | Error::Capacity { .. }
            | Error::InstrumentMapping(_)
            | Error::VocabMismatch { .. } => 6,
            Error::Contract(_) | Error::NonFiniteLoss { .. } => 7,
        }
    }

    /// One-line machine-parsable class tag, printed on CLI failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::MidiParse { .. } => "midi-parse",
            Error::UnsupportedSmfFormat(_) => "unsupported-format",
            Error::Io { .. } => "io",
            Error::Encoding { .. } => "encoding",
            Error::Decoding { .. } => "decoding",
            Error::Capacity { .. } => "capacity",
            Error::InstrumentMapping(_) => "instrument-mapping",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
            Error::VocabMismatch { .. } => "vocab-mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
        }
    }
}
