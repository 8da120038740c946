use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch on axis {axis}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {actual:?}")]
    RankMismatch {
        op: &'static str,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("tensor data length {actual} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("conv2d: kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("linear operator '{0}' has no adjoint and cannot be placed on the tape")]
    MissingAdjoint(String),
    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),
}
