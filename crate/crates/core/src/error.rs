use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate {kind} primitive: {reason}")]
    DegeneratePrimitive { kind: &'static str, reason: String },

    #[error("dataset schema error at {location}: {message}")]
    Schema { location: String, message: String },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("pooling over an empty layer group")]
    EmptyGroup,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsatisfiable generator spec: {0}")]
    Generator(String),

    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: usize, classes: usize },

    #[error("non-finite logits at decoder layer {layer}")]
    NonFiniteLogits { layer: usize },

    #[error("{targets} targets cannot be matched to {queries} queries")]
    TooManyTargets { targets: usize, queries: usize },

    #[error("duplicate symbol key (label {label}, instance {instance})")]
    DuplicateSymbol { label: usize, instance: i64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("class vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            location: location.into(),
            message: message.into(),
        }
    }
}
