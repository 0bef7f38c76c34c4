use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("instance {id} violates invariants: {}", violations.join("; "))]
    Invalid { id: String, violations: Vec<String> },

    #[error("attention mask removes every unit")]
    DegenerateMask,

    #[error("explanation cache has no entry for ({id}, choice {choice})")]
    CacheMiss { id: String, choice: usize },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("non-finite gradient for unit {unit} of ({id}, choice {choice})")]
    NonFiniteGradient {
        id: String,
        choice: usize,
        unit: usize,
    },

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("run {0} was already recorded")]
    Duplicate(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
