use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest row {row}: {message}")]
    ManifestRow { row: usize, message: String },

    #[error("duplicate study_id `{0}`")]
    DuplicateStudy(String),

    #[error("label vector has length {got}, vocabulary has {expected} entries")]
    LabelLength { expected: usize, got: usize },

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("invalid volume: {0}")]
    Volume(String),

    #[error("volume container: {0}")]
    Container(String),

    #[error("shape {dim} along axis {axis} is not divisible by patch size {patch}")]
    PatchShape {
        axis: char,
        dim: usize,
        patch: usize,
    },

    #[error("text: {0}")]
    Text(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss {loss} at step {step} (batch: {batch:?})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        batch: Vec<String>,
    },

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("server: {0}")]
    Server(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
