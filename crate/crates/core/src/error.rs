use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Structured parameters do not match a [`crate::codec::LayoutManifest`].
    #[error("layout error at layer `{layer}`: {detail}")]
    Layout { layer: String, detail: String },

    #[error("corrupt weight vector: {0}")]
    Corrupt(String),

    #[error("incomplete chunk set: missing chunk index {missing}")]
    IncompleteChunks { missing: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index {index} out of range 0..{len}")]
    OutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset ingestion failed for `{dataset}`: {detail}")]
    Ingestion { dataset: String, detail: String },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("{stage} diverged at step {step} (batch {batch}); parameters rolled back to the last stable state")]
    Diverged {
        stage: &'static str,
        step: usize,
        batch: usize,
    },

    #[error("unsupported mode: {0}")]
    Unsupported(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn layout(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Layout {
            layer: layer.into(),
            detail: detail.into(),
        }
    }
}
