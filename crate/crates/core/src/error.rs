use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("class `{0}` has no examples")]
    EmptyClass(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("embedding provider failed on batch indices {indices:?}: {message}")]
    EmbeddingFetch { indices: Vec<usize>, message: String },

    #[error("undefined cosine similarity: {0}")]
    ZeroNorm(String),

    #[error("incompatible embeddings: {0}")]
    IncompatibleEmbeddings(String),

    #[error("backend error for `{tag}`: {message}")]
    Backend { tag: String, message: String },

    #[error("retry budget exhausted for `{tag}` after {attempts} attempts: {message}")]
    RetriesExhausted {
        tag: String,
        attempts: u32,
        message: String,
    },

    #[error("mock backend has no script entry for `{0}`")]
    UnscriptedRequest(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("missing binding for placeholder `{{{placeholder}}}` in template `{template}`")]
    MissingBinding {
        template: String,
        placeholder: String,
    },

    #[error("empty response for `{0}`")]
    EmptyResponse(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("artifact `{}` does not match its recorded hash", path.display())]
    HashMismatch { path: PathBuf },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid configuration rather than a failed run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
