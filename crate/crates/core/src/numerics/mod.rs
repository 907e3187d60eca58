//! Dense `f64` matrix kernel and the seeded generator used everywhere else.
//!
//! Only the operations the adapter compute graph needs are provided. Every
//! operation checks shapes and reports both sides on mismatch.

mod matrix;
mod rng;

pub use matrix::{
    concat_rows, dot, frobenius_inner, matmul, matmul_nt, matmul_tn, matvec, mean_rows, rms,
    sigmoid, softmax, softmax_rows, Matrix, MatrixView,
};
pub use rng::Rng;
