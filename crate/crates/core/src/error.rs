use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("observations have zero probability under every intention")]
    DegenerateEvidence,
    #[error("invalid prefix at symbol {position}: {reason}")]
    InvalidPrefix { position: usize, reason: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("exact enumeration horizon {horizon} exceeds the cap of {cap}")]
    HorizonTooLarge { horizon: usize, cap: usize },
    #[error("intention path has zero probability at step {0}")]
    ZeroProbabilityPath(usize),
    #[error("corpus line {line}: {reason}")]
    CorpusLine { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
