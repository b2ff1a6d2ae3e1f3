//! Dense array math, seeded randomness, reverse-mode gradients, and the
//! finite-difference checker — the substrate the rest of the crate builds on.
//!
//! Broadcasting is limited to the documented cases: row broadcasts
//! (`[R,C] op [C]`), the column broadcast `[R,1] -> [R,C]`, and scalar
//! affine maps. Anything else is a shape error.

pub mod alloc;
mod array;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod rng;

pub use array::{Array, DType, Scalar};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, NodeId, ScanMode};
pub use rng::{derive_seed, xavier_normal_init, SeededRng};

use thiserror::Error;

/// Errors from array construction and numeric operations.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("allocation of {requested} bytes exceeds limit {limit} ({in_use} in use)")]
    AllocLimit {
        requested: usize,
        limit: usize,
        in_use: usize,
    },
    #[error("non-finite value at stage `{stage}`")]
    NonFinite { stage: String },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Standard matrix product `[m,k]·[k,n] -> [m,n]`.
pub fn matmul<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>, NumError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(NumError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    kernels::gemm_nn(a.as_slice(), b.as_slice(), m, k, n, &mut out, false);
    Array::from_vec(&[m, n], out)
}

/// Elementwise `ln(1 + e^x)`, computed as `max(x,0) + ln(1 + e^{-|x|})`.
pub fn softplus<T: Scalar>(x: &Array<T>) -> Array<T> {
    x.map(kernels::softplus_scalar)
        .expect("softplus preserves shape")
}

/// Elementwise `x · sigmoid(x)`.
pub fn silu<T: Scalar>(x: &Array<T>) -> Array<T> {
    x.map(|v| v * kernels::sigmoid_scalar(v))
        .expect("silu preserves shape")
}

/// Elementwise logistic function.
pub fn sigmoid<T: Scalar>(x: &Array<T>) -> Array<T> {
    x.map(kernels::sigmoid_scalar).expect("sigmoid preserves shape")
}
