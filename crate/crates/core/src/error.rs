use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid label value {value} at voxel {index}; expected one of 0, 1, 2, 4")]
    InvalidLabel { value: u8, index: usize },

    #[error("non-binary mask value {value} at index {index}")]
    NonBinaryMask { value: u8, index: usize },

    #[error("modality {0} not found")]
    MissingModality(&'static str),

    #[error("no foreground available for cropping")]
    NoForeground,

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration} (lr {lr:e}, dice {dice}, bce {bce}, total {total})")]
    NonFinite {
        iteration: usize,
        lr: f64,
        dice: f64,
        bce: f64,
        total: f64,
    },

    #[error("checkpoint {checkpoint} does not match architecture {arch}: {detail}")]
    CheckpointMismatch {
        checkpoint: String,
        arch: String,
        detail: String,
    },

    #[error("case {0} appears in both the training data and the evaluation split")]
    SplitLeak(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
