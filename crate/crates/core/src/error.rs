use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {location}: {message}")]
    Malformed { location: String, message: String },

    #[error("empty document at {location}")]
    EmptyDocument { location: String },

    #[error("token id {token} in document {doc_id} is out of vocabulary (vocab_size {vocab_size})")]
    TokenOutOfVocab {
        doc_id: String,
        token: u32,
        vocab_size: u32,
    },

    #[error("manifest mismatch on {field}: manifest says {expected}, corpus has {actual}")]
    ManifestMismatch {
        field: &'static str,
        expected: String,
        actual: String,
    },

    #[error("content hash mismatch for {path}: manifest {expected}, file {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("document {doc_id} contains the reserved pad id {pad_id}")]
    PadCollision { doc_id: String, pad_id: u32 },

    #[error("bad {format} file: {message}")]
    Format { format: &'static str, message: String },

    #[error("empty tail: no occupied bucket has lower bound >= tau={tau}; occupied buckets: {occupied}")]
    EmptyTail { tau: u64, occupied: String },

    #[error("fingerprint mismatch: expected {expected}, found {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("length mismatch: {what} has {actual} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("loss mask is all zero")]
    AllMasked,

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("probe error: {0}")]
    Probe(String),
}

impl Error {
    /// Stable short code used in the CLI's machine-readable error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Malformed { .. } => "malformed_record",
            Error::EmptyDocument { .. } => "empty_document",
            Error::TokenOutOfVocab { .. } => "token_out_of_vocab",
            Error::ManifestMismatch { .. } => "manifest_mismatch",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::PadCollision { .. } => "pad_collision",
            Error::Format { .. } => "format",
            Error::EmptyTail { .. } => "empty_tail",
            Error::FingerprintMismatch { .. } => "fingerprint_mismatch",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::AllMasked => "all_zero_mask",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Divergence { .. } => "divergence",
            Error::Probe(_) => "probe",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            format,
            message: message.into(),
        }
    }
}
