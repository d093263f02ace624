use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("invalid labels: {0}")]
    InvalidLabel(String),
    #[error("missing labels for verb `{0}`")]
    MissingLabels(String),
    #[error("unknown verb `{0}`")]
    UnknownVerb(String),
    #[error("no embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("verb `{verb}` has no definitions")]
    NoDefinitions { verb: String },
    #[error("candidate mismatch: {0}")]
    CandidateMismatch(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: bad magic")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated payload ({msg})")]
    Truncated { path: PathBuf, msg: String },
    #[error("{path}: dimension mismatch ({msg})")]
    DimensionMismatch { path: PathBuf, msg: String },
    #[error("{path}: unsupported version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("schema fingerprint mismatch: model has {model}, schema has {schema}")]
    Fingerprint { model: String, schema: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
