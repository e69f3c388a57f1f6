use std::path::PathBuf;

use dpm_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("{op}: shapes {lhs:?} and {rhs:?} must match")]
    Contract {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("pair {id}: rainy {rainy:?} and clean {clean:?} extents differ")]
    PairExtent {
        id: String,
        rainy: Vec<usize>,
        clean: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint parameter {name}: {msg}")]
    CheckpointMismatch { name: String, msg: String },
    #[error(
        "non-finite loss at step {step} (lr {lr:e}): total {total}, charbonnier {charbonnier}, edge {edge}, fft {fft}"
    )]
    NonFinite {
        step: u64,
        lr: f64,
        total: f64,
        charbonnier: f64,
        edge: f64,
        fft: f64,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
