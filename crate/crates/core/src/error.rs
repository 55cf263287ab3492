use std::io;

use thiserror::Error;

use crate::topology::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tree parameters: {0}")]
    InvalidTree(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid straggler pattern: {0}")]
    InvalidPattern(String),

    /// A decode row could not reproduce the all-ones vector for this survivor set.
    #[error("code cannot decode survivor set {survivors:?} (residual {residual:e})")]
    CodeInvalid { survivors: Vec<usize>, residual: f64 },

    #[error("encoding construction failed after {attempts} attempts for (n={n}, s={s})")]
    EncodingFailed { n: usize, s: usize, attempts: u32 },

    #[error("{points} points cannot be split evenly into {parts} parts")]
    Divisibility { points: usize, parts: usize },

    #[error("dataset size {d} is not a multiple of the allocation granularity {granularity}")]
    Granularity { d: usize, granularity: usize },

    #[error("parent {parent} has {survivors} responsive children but needs {required}")]
    Unrecoverable {
        parent: NodeId,
        survivors: usize,
        required: usize,
    },

    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Parse(String),

    #[error("wire protocol error: {0}")]
    Wire(String),

    #[error("deadline expired at parent {parent}: received {received} of {required} gradient messages")]
    Timeout {
        parent: NodeId,
        received: usize,
        required: usize,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
