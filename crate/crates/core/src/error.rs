use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}:{line}: malformed line: {msg}")]
    MalformedLine {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("id out of range: {0}")]
    IdOutOfRange(String),
    #[error("degenerate parameters: {0}")]
    Degenerate(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("sentence {0}: encoding failed: {1}")]
    SentenceEncode(String, String),
    #[error("scorer protocol violation at line {line}: {msg}")]
    ScorerProtocol { line: usize, msg: String },
    #[error("unsupported format version: {0}")]
    Version(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
