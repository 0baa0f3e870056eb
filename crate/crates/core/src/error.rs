use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label:?} is not in the vocabulary (known labels: {})", known.join(", "))]
    Vocabulary { label: String, known: Vec<String> },

    #[error("invalid config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("bad magic in checkpoint {0}")]
    BadMagic(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint holds tensor `{0}` that the model does not define")]
    UnexpectedTensor(String),

    #[error("sample {id} ({path}): {msg}")]
    Sample {
        id: String,
        path: PathBuf,
        msg: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("batch: {0}")]
    Batch(String),

    #[error("training diverged at step {step}: {term} is non-finite ({breakdown})")]
    Diverged {
        step: usize,
        term: String,
        breakdown: String,
    },

    #[error("adapter `{name}` violates the bypass contract: {detail}")]
    Adapter { name: String, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
