use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum FwsError {
    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch size mismatch: query batch {query} vs prototype batch {support}; use LCM broadcasting or averaged prototypes")]
    ProtoBatch { query: usize, support: usize },

    #[error("non-finite {0}")]
    NonFinite(String),

    #[error("every class is absent from the support set")]
    NoClasses,

    #[error("no disc pixels in mask")]
    NoDisc,

    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FwsError>;

impl FwsError {
    pub(crate) fn range(what: &'static str, detail: impl Into<String>) -> Self {
        Self::Range { what, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
