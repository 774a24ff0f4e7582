use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("degenerate cloud: {points} point(s), need at least 2")]
    DegenerateCloud { points: usize },

    #[error("similarity undefined for an empty feature map")]
    EmptyMap,

    #[error("{stream} stream out of order at t = {timestamp}")]
    OutOfOrder {
        stream: &'static str,
        timestamp: f64,
    },

    #[error("no positive pairs among the labeled pairs; recall is undefined")]
    NoPositives,

    #[error("scored pair ({i}, {j}) has no ground-truth label")]
    UnlabeledPair { i: usize, j: usize },

    #[error("missing required file {0}")]
    MissingFile(PathBuf),

    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: u64,
        message: String,
    },

    #[error("unit mismatch for {quantity}: expected {expected}, found {found}")]
    UnitMismatch {
        quantity: String,
        expected: String,
        found: String,
    },

    #[error("unknown scenario '{0}' (expected pond, abyss or flats)")]
    UnknownScenario(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
