use thiserror::Error;

/// Errors produced by the tree, subspace and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tree shape: {0}")]
    InvalidShape(String),

    #[error("address digit {digit} out of range for branching factor {q}")]
    AddressOutOfRange { digit: usize, q: usize },

    #[error("atom depth {depth} exceeds truncation depth {max}")]
    DepthExceedsTruncation { depth: usize, max: usize },

    #[error("atom at depth {depth} is a leaf of the truncated tree")]
    LeafAtom { depth: usize },

    #[error("polar undefined at atom: martingale value is zero")]
    PolarUndefined,

    #[error(
        "matrix violates the zero column-sum constraint (max |column sum| = {max_column_sum:e})"
    )]
    ConstraintViolation { max_column_sum: f64 },

    #[error("rank-one increment is not in the constraint space (relative residual {residual:e})")]
    NotInSpace { residual: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("angle undefined for a zero vector or zero matrix")]
    UndefinedAngle,

    #[error("atom is not {eps}-flat (excess {excess:e})")]
    NotFlat { eps: f64, excess: f64 },

    #[error("constraint sampling failed after {retries} retries: {reason}")]
    SamplingFailed { retries: usize, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_mismatch(expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
