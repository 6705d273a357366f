//! Dense `f64` kernel: matrices, orthogonalization, symmetric eigensolver,
//! pseudo-inverse, softmax, and the seeded random source.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{log_sum_exp, pinv_psd, qr_orthonormal, softmax, sym_eig};
pub use matrix::{axpy, dot, norm, Matrix};
pub use rng::{streams, Rng};

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest entry; ties resolve to the lowest index.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}
