//! Dense double-precision tensors and a reverse-mode automatic differentiation
//! tape.
//!
//! Everything the reconstruction pipeline differentiates through is expressed
//! with the operations in this crate: same-padded 2-D convolution, ReLU,
//! elementwise arithmetic, batch reductions and linear operators that carry an
//! explicit adjoint. Complex images are stored as a trailing real axis of
//! length two, so the tape itself only ever sees real numbers.

mod error;
pub mod gradcheck;
mod linear;
mod ops;
mod tape;
mod tensor;

pub use error::AutodiffError;
pub use linear::{LinearMap, LinearOp};
pub use tape::{BackwardFn, Gradients, NodeId, Tape};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Sums `values` by recursive halving.
///
/// The reduction tree depends only on the slice length, so results are
/// reproducible regardless of how the inputs were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// Elementwise sum of equally sized rows, reduced pairwise in a fixed order.
pub fn pairwise_sum_rows(rows: &[&[f64]]) -> Vec<f64> {
    match rows.len() {
        0 => Vec::new(),
        1 => rows[0].to_vec(),
        n => {
            let (lo, hi) = rows.split_at(n / 2);
            let mut acc = pairwise_sum_rows(lo);
            let rhs = pairwise_sum_rows(hi);
            for (a, b) in acc.iter_mut().zip(&rhs) {
                *a += b;
            }
            acc
        }
    }
}
