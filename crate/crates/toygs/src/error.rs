//! Error type shared across the pipeline.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing input file: {0}")]
    MissingFile(PathBuf),

    #[error("parse error in {file} at line {line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported camera model `{0}` (only PINHOLE and SIMPLE_PINHOLE are supported)")]
    UnsupportedCameraModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("region {0} has an empty point cloud; reduce the region count")]
    EmptyRegion(usize),

    #[error("partition failed: region {0} selected zero cameras")]
    Partition(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    #[error("training collapsed: every Gaussian was pruned")]
    TrainingCollapse,

    #[error("global merge produced an empty cloud")]
    MergeEmpty,

    #[error("output already exists: {0} (partial runs cannot be resumed; remove it first)")]
    StateCollision(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage/input, 3 state collision,
    /// 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::StateCollision(_) => 3,
            Error::Divergence { .. } | Error::TrainingCollapse => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
