use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid calibration: {0}")]
    Calibration(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("sequence length {len} exceeds context {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("stage dependency not met: {0}")]
    Stage(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported format version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
