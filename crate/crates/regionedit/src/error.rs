use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("mask: {0}")]
    Mask(String),
    #[error("unknown instruction symbol {0}")]
    UnknownSymbol(usize),
    #[error("instruction must contain at least one token")]
    EmptyInstruction,
    #[error("adapter hook at block {block} returned shape {got:?}, expected {want:?}")]
    HookShape { block: usize, got: Vec<usize>, want: Vec<usize> },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("unknown mask source {0}")]
    UnknownMaskSource(String),
    #[error("{0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("toml: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
