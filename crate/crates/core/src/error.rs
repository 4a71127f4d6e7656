use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward called without a recorded forward pass")]
    NoForwardRecord,
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("state ({x}, {y}) is outside the {size}x{size} grid")]
    OutOfBounds { x: i64, y: i64, size: usize },
    #[error("invalid action {action:?} at ({x}, {y}, t={t})")]
    InvalidAction {
        action: crate::grid::Action,
        x: usize,
        y: usize,
        t: usize,
    },
    #[error("the root state has no parents")]
    RootHasNoParents,
    #[error("all actions are masked")]
    AllMasked,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("model not trained")]
    Untrained,
    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("corrupt weights file: {0}")]
    Weights(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
