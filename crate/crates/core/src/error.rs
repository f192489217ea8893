use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("caption rendering error: {0}")]
    Render(String),

    #[error("tokenization error: word {0:?} is not in the caption vocabulary")]
    Tokenize(String),

    #[error("caption source error: {0}")]
    CaptionSource(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("batch structure error: {0}")]
    BatchStructure(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training diverged: loss term {term} is {value}")]
    Divergence { term: &'static str, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("missing dependency: {0} does not exist")]
    MissingDependency(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
