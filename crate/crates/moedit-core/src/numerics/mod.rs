//! Deterministic dense numeric kernels.
//!
//! Row-major `f64` matrices with fixed-order reductions (no parallel or
//! reassociated sums), a seeded portable RNG, paired forward/backward
//! activation kernels, a decoupled-weight-decay Adam optimizer, and a
//! central-finite-difference gradient checker. Every module above this
//! one builds on these kernels, so bit-stability here makes whole runs
//! replayable.

mod gradcheck;
mod loss;
mod matrix;
mod optim;
mod rng;

pub use gradcheck::finite_diff_check;
pub use loss::cross_entropy_grad;
pub use matrix::{checksum_f64s, dot, matvec, vecmat, Matrix};
pub use optim::{AdamW, AdamWParams};
pub use rng::{Rng, RNG_ALGORITHM};

use alloc::string::String;
use alloc::vec::Vec;

use crate::math;

/// Errors from the numeric kernels.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value encountered during {0}")]
    NonFinite(&'static str),
}

#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

/// `silu(x) = x * sigmoid(x)`, applied elementwise.
pub fn silu(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| x * sigmoid(x)).collect()
}

/// Derivative of silu: `sigmoid(x) * (1 + x * (1 - sigmoid(x)))`.
#[inline(always)]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable softmax (max subtraction). Output sums to 1.
pub fn softmax(xs: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if xs.is_empty() {
        return Err(NumericsError::Argument(String::from(
            "softmax of empty vector",
        )));
    }
    let mut max = xs[0];
    for &x in &xs[1..] {
        if x > max {
            max = x;
        }
    }
    let mut out: Vec<f64> = xs.iter().map(|&x| math::exp(x - max)).collect();
    let mut sum = 0.0;
    for &e in &out {
        sum += e;
    }
    for e in &mut out {
        *e /= sum;
    }
    Ok(out)
}

/// In-place row softmax over the leading `len` entries of `row`.
/// Used by attention so no allocation happens in the hot loop.
pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = math::exp(*x - max);
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Backward of a softmax row: `ds_i = p_i * (dp_i - sum_j dp_j p_j)`.
pub(crate) fn softmax_row_backward(p: &[f64], dp: &[f64], ds: &mut [f64]) {
    let mut inner = 0.0;
    for (pv, dv) in p.iter().zip(dp) {
        inner += pv * dv;
    }
    for ((d, pv), dv) in ds.iter_mut().zip(p).zip(dp) {
        *d = pv * (dv - inner);
    }
}

#[cfg(test)]
mod tests;
