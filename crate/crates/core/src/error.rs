use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite point at index {0}")]
    NonFinitePoint(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unlabeled cell ({row}, {col})")]
    UnlabeledCell { row: usize, col: usize },

    #[error("no cells to match")]
    NoCellsToMatch,

    #[error("epsilon too small: Gibbs kernel underflow at epsilon = {0}")]
    EpsilonTooSmall(f64),

    #[error("isolated source cell {0}: transport row sums to zero")]
    IsolatedSourceCell(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("stride-2 sampling misses current frame (sequence length {0})")]
    StrideMissesCurrent(usize),

    #[error("label at ({row}, {col}) lies outside the predicted validity mask")]
    LabelOutsideValid { row: usize, col: usize },

    #[error("object placement failed after {0} attempts")]
    PlacementFailed(usize),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("malformed container at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
