use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("sequence has {frames} frame(s); at least 2 are required")]
    InsufficientFrames { frames: usize },

    #[error("invalid sequence `{sample_id}`: {reason}")]
    InvalidSequence { sample_id: String, reason: String },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("noise ratio {0} is outside [0, 1)")]
    InvalidRatio(f64),

    #[error("label noise needs at least 2 classes, got {0}")]
    DegenerateClasses(usize),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("unknown sample id `{0}`")]
    UnknownSample(String),

    #[error("precision is undefined for an empty selection")]
    EmptySelection,

    #[error("label {label} is out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("model produced a non-finite loss for sample `{0}`")]
    CorruptModel(String),

    #[error("loss tables disagree: {0}")]
    Inconsistent(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate ensemble weights {0}")]
    DegenerateWeights(String),

    #[error("nothing to plot: {0}")]
    NothingToPlot(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
