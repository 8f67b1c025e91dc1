use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("singular transform: |det| = {det:e} is below 1e-12")]
    SingularTransform { det: f64 },

    #[error("degenerate crop: drawn crop side {side:.4} collapses below one pixel")]
    DegenerateCrop { side: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("counterfactual requires at least one intervention")]
    NoIntervention,

    #[error("no pixel is valid in every active view")]
    EmptyIntersection,

    #[error("every sampled pixel is background; supervised losses need foreground anchors")]
    NoForegroundAnchors,

    #[error("labels required: {0}")]
    LabelsRequired(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("need at least {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },

    #[error("d/sigma needs at least two classes present")]
    SingleClass,

    #[error("points are collinear; no bounded enclosing ellipse exists")]
    CollinearPoints,

    #[error("mask has an empty surface for class {class}")]
    EmptySurface { class: u8 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
