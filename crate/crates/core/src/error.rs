use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not hold {len} values")]
    Length { shape: Vec<usize>, len: usize },

    #[error("attention row {row} is fully masked")]
    FullyMasked { row: usize },

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ontology parse error at line {line}: {msg}")]
    OntologyParse { line: usize, msg: String },

    #[error("empty corpus: co-occurrence needs at least one sample")]
    EmptyCorpus,

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("no reference example supports any class")]
    NoSupport,

    #[error("cannot normalize a zero-norm embedding")]
    ZeroNorm,

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("training diverged at iteration {iter}: loss {loss}")]
    Diverged { iter: usize, loss: f64 },

    #[error("{0}")]
    Eval(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
