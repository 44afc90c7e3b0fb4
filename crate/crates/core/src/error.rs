use std::path::PathBuf;

use rapnet_tensor::TensorError;
use thiserror::Error;

use crate::matching::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ingest error in {} at {key}: {msg}", path.display())]
    Ingest {
        path: PathBuf,
        key: String,
        msg: String,
    },

    #[error("format error in {} at byte {offset}: {msg}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("invalid segment [{start}, {end}]")]
    InvalidSegment { start: f64, end: f64 },

    #[error("synthetic generation failed for video {video_index}: {msg}")]
    Generation { video_index: usize, msg: String },

    #[error("clustering: {0}")]
    Clustering(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("non-finite value in loss term {term}")]
    Numeric { term: &'static str },

    #[error("non-finite loss at step {step}: {breakdown:?}")]
    Divergence { step: usize, breakdown: LossBreakdown },

    #[error("no actionness curve for video {0}")]
    MissingActionness(String),

    #[error("evaluation: {0}")]
    Evaluation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }
}
