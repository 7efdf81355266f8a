use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("batch contains no non-pad positions")]
    DegenerateBatch,
    #[error("backward requires a scalar loss")]
    NonScalarLoss,
    #[error("tensor is not attached to the active tape")]
    NoTape,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("input is not valid UTF-8")]
    InvalidUtf8,
    #[error("parallel files have {src} vs {tgt} lines")]
    LineCountMismatch { src: usize, tgt: usize },
    #[error("batch size {0} is too small (minimum 2)")]
    BatchTooSmall(usize),
    #[error("sequence length {len} exceeds maximum {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("attention mask allows no positions for some query")]
    MaskAllFalse,
    #[error("row {0} has no non-pad positions")]
    EmptyRow(usize),
    #[error("batch mismatch: {0}")]
    BatchMismatch(String),
    #[error("unknown distance kind: {0}")]
    UnknownDistanceKind(String),
    #[error("model dim {dim} not divisible by {n}")]
    IndivisibleDim { n: usize, dim: usize },
    #[error("module already registered: {0}")]
    DuplicateModule(String),
    #[error("parameter aliasing detected: {0}")]
    ParameterAliasing(String),
    #[error("no module registered for {0}")]
    MissingModule(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("vocabulary fingerprint mismatch for language {language}: expected {expected:08x}, got {actual:08x}")]
    VocabFingerprintMismatch {
        language: String,
        expected: u32,
        actual: u32,
    },
    #[error("decoder for {0} must be frozen before incremental training")]
    DecoderNotFrozen(String),
    #[error("dev set is empty")]
    EmptyDevSet,
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("hypothesis and reference counts differ: {hyp} vs {refs}")]
    LengthMismatch { hyp: usize, refs: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
