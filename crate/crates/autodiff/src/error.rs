use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("tensor rank {0} exceeds the supported maximum of 5 axes")]
    RankTooLarge(usize),

    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: expected a rank-{expected} input, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },

    #[error("{op}: window {window:?} does not fit input extent {extent:?}")]
    WindowTooLarge {
        op: &'static str,
        window: [usize; 3],
        extent: [usize; 3],
    },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("batch norm evaluated before any training step initialized its running statistics")]
    UninitializedRunningStats,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; call zero_grad before running it again")]
    BackwardTwice,

    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
}
