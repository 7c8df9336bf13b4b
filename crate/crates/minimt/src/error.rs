use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("tensor is not on this tape")]
    TensorNotOnTape,

    #[error("dropout rate {0} out of range [0, 1)")]
    DropoutRate(f64),

    #[error("non-finite {what} in tensor '{name}'")]
    NonFinite { what: &'static str, name: String },

    #[error("tokenizer: input contains the joiner marker {joiner:?}")]
    JoinerInInput { joiner: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("line count mismatch: files diverge at line {line}")]
    LineMismatch { line: usize },

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum failure: {0}")]
    Checksum(String),

    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("decode: {0}")]
    Decode(String),

    #[error("replica divergence: parameter checksum mismatch on worker {worker}")]
    ReplicaDivergence { worker: usize },

    #[error("staleness bound {bound} violated: gradient is {staleness} updates old")]
    Staleness { staleness: u64, bound: u64 },

    #[error("server: {0}")]
    Server(String),

    #[error("embeddings: {0}")]
    Embeddings(String),

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
