use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("frame {0} is not the first element of any graph edge")]
    NoEdgesForFrame(usize),

    #[error("frame graph is disconnected: frame {0} is unreachable from frame 0")]
    DisconnectedGraph(usize),

    #[error("missing estimated flow for pair {from} -> {to}")]
    MissingFlow { from: usize, to: usize },

    #[error("loss became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("no points survived the confidence filter")]
    NoSurvivingPoints,

    #[error("zero static pixels after mask binarization")]
    NoStaticPixels,

    #[error("infeasible scene: {0}")]
    Infeasible(String),

    #[error("missing input file {path}: {reason}")]
    MissingFile { path: PathBuf, reason: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
