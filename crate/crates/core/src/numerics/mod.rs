//! Dense numeric kernels shared by the transformer runtime, the loop engine
//! and the toy lab.
//!
//! Storage is row-major. Reductions (dot products, norms, softmax sums)
//! accumulate in `f64` regardless of the storage type, and every kernel runs
//! in a fixed serial order so results are bit-reproducible.

mod kernels;
mod matrix;
mod rng;

use std::sync::atomic::{AtomicBool, Ordering};

pub use kernels::{dot, matmul, rms_norm, rope_rotate, silu, softmax, DEFAULT_NORM_EPS};
pub use matrix::{Matrix, Scalar};
pub use rng::SeededRng;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: length mismatch, expected {expected}, found {found}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("rope: head dimension {0} is odd")]
    OddHeadDim(usize),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

static DETERMINISTIC: AtomicBool = AtomicBool::new(true);

/// Enables or disables deterministic mode.
///
/// The kernels in this module always reduce in serial order; the flag is
/// consulted by callers that could otherwise introduce nondeterminism
/// (worker pools, wall-clock fields in reports).
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}
