use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("corner {index} has non-positive depth {depth}")]
    NonPositiveDepth { index: usize, depth: f64 },
    #[error("depths are in virtual space; convert to metric before unprojecting")]
    VirtualDepthNotConverted,
    #[error("non-positive input: {0}")]
    NonPositiveInput(&'static str),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid cuboid: {0}")]
    InvalidCuboid(String),
    #[error("invalid corner set: {0}")]
    InvalidCorners(String),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("optimisation diverged at step {step}")]
    Diverged { step: usize },
    #[error("cost matrix contains a non-finite or negative entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("ground-truth diagonal must be positive, got {0}")]
    NonPositiveDiagonal(f64),
    #[error("corner set is degenerate (rank < 2)")]
    DegenerateCorners,
    #[error("depth space mismatch: prediction is {pred}, ground truth is {gt}")]
    DepthSpaceMismatch { pred: String, gt: String },
    #[error("ground-truth depth at corner {index} is non-positive")]
    NonPositiveGtDepth { index: usize },
    #[error("instance {0} has no intrinsics")]
    MissingIntrinsics(String),
    #[error("instance {0} has no counterpart")]
    UnmatchedInstance(String),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("could not generate a valid instance within {attempts} attempts")]
    GenerationExhausted { attempts: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
