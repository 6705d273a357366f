use crate::error::{Error, Result};

use super::matrix::{axpy, dot, norm, Matrix};

const DEGENERATE_NORM: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-15;
const PINV_REL_THRESHOLD: f64 = 1e-10;

/// Orthonormalizes the columns of `g` (d×K, d ≥ K).
///
/// Modified Gram-Schmidt with one full re-orthogonalization pass. The implied
/// triangular factor has a positive diagonal, which fixes the sign of every
/// output column.
pub fn qr_orthonormal(g: &Matrix) -> Result<Matrix> {
    let (d, k) = g.shape();
    if d < k {
        return Err(Error::shape(format!(
            "qr_orthonormal needs rows >= cols, got {d}x{k}"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = g.column(j);
        for _ in 0..2 {
            for q in &basis {
                let r = dot(q, &v);
                axpy(-r, q, &mut v);
            }
        }
        let n = norm(&v);
        if !(n >= DEGENERATE_NORM) {
            return Err(Error::DegenerateDraw { column: j, norm: n });
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    Matrix::from_columns(&basis)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(s + sᵀ)/2`. Eigenvalues come back sorted
/// descending, with eigenvectors as the matching columns of the second value.
pub fn sym_eig(s: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::shape(format!(
            "sym_eig needs a square matrix, got {:?}",
            s.shape()
        )));
    }
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();

    let off = |a: &Matrix| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += a[(i, j)] * a[(i, j)];
                }
            }
        }
        acc.sqrt()
    };

    let mut converged = scale == 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        if off(&a) <= JACOBI_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                rotate(&mut a, &mut v, p, q, c, sn);
            }
        }
        sweeps += 1;
    }
    if !converged {
        let residual = off(&a);
        if residual > JACOBI_TOL * scale {
            return Err(Error::NoConvergence { sweeps, residual });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

/// Applies the Jacobi rotation zeroing `a[p,q]`: `a ← Jᵀ a J`, `v ← v J`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    let app = a[(p, p)];
    let aqq = a[(q, q)];
    let apq = a[(p, q)];
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        a[(k, p)] = new_kp;
        a[(p, k)] = new_kp;
        a[(k, q)] = new_kq;
        a[(q, k)] = new_kq;
    }
    a[(p, p)] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
    a[(q, q)] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix.
///
/// Eigenvalues at or below `1e-10·λ_max` (including small negative ones from
/// rounding) are treated as zero.
pub fn pinv_psd(s: &Matrix) -> Result<Matrix> {
    let n = s.rows();
    let (values, vectors) = sym_eig(s)?;
    let lambda_max = values.first().copied().unwrap_or(0.0);
    if !(lambda_max > 0.0) {
        return Ok(Matrix::zeros(n, n));
    }
    let tau = PINV_REL_THRESHOLD * lambda_max;
    let mut out = Matrix::zeros(n, n);
    for (k, &lambda) in values.iter().enumerate() {
        if lambda <= tau {
            continue;
        }
        let inv = 1.0 / lambda;
        for i in 0..n {
            let vi = vectors[(i, k)] * inv;
            if vi == 0.0 {
                continue;
            }
            for j in 0..n {
                out[(i, j)] += vi * vectors[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

/// `log Σ exp(v_i)`, computed stably.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn gram_error(q: &Matrix) -> f64 {
        q.t_matmul(q)
            .unwrap()
            .sub(&Matrix::identity(q.cols()))
            .unwrap()
            .frobenius_norm()
    }

    #[test]
    fn qr_identity_and_positive_diagonal() {
        let q = qr_orthonormal(&Matrix::identity(2)).unwrap();
        assert_eq!(q, Matrix::identity(2));
        let q = qr_orthonormal(&Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]])).unwrap();
        assert_eq!(q, Matrix::identity(2));
        // Negative scaling gets its sign fixed, not preserved.
        let q = qr_orthonormal(&Matrix::from_rows(&[[-2.0, 0.0], [0.0, 3.0]])).unwrap();
        assert_eq!(q[(0, 0)], -1.0);
    }

    #[test]
    fn qr_random_draw_seed_7() {
        let mut rng = Rng::new(7, 0);
        let g = rng.normal_matrix(4, 2);
        let q = qr_orthonormal(&g).unwrap();
        assert!(gram_error(&q) <= 1e-10);
    }

    #[test]
    fn qr_large_draw() {
        let mut rng = Rng::new(3, 9);
        let g = rng.normal_matrix(512, 128);
        let q = qr_orthonormal(&g).unwrap();
        assert!(gram_error(&q) <= 1e-10, "{}", gram_error(&q));
    }

    #[test]
    fn qr_rank_deficient() {
        let g = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]]);
        match qr_orthonormal(&g) {
            Err(Error::DegenerateDraw { column: 1, .. }) => {}
            other => panic!("expected degenerate draw, got {other:?}"),
        }
        assert!(qr_orthonormal(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn eig_known_cases() {
        let (l, v) = sym_eig(&Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]])).unwrap();
        assert_eq!(l, vec![3.0, 1.0]);
        assert_eq!(v, Matrix::identity(2));

        let (l, _) = sym_eig(&Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]])).unwrap();
        assert!((l[0] - 1.0).abs() < 1e-15 && (l[1] + 1.0).abs() < 1e-15);

        let (l, v) = sym_eig(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(l, vec![0.0; 3]);
        assert_eq!(v, Matrix::identity(3));
    }

    #[test]
    fn eig_reconstruction_seed_11() {
        let mut rng = Rng::new(11, 0);
        let g = rng.normal_matrix(5, 5);
        let s = g.add(&g.transpose()).unwrap();
        let (l, v) = sym_eig(&s).unwrap();
        for w in l.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let lam = Matrix::from_fn(5, 5, |i, j| if i == j { l[i] } else { 0.0 });
        let rec = v.matmul(&lam).unwrap().matmul_t(&v).unwrap();
        let err = rec.sub(&s).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * s.frobenius_norm());
    }

    #[test]
    fn pinv_cases() {
        let p = pinv_psd(&Matrix::from_rows(&[[2.0, 0.0], [0.0, 0.0]])).unwrap();
        assert_eq!(p, Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.0]]));
        assert_eq!(pinv_psd(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        assert_eq!(pinv_psd(&Matrix::zeros(4, 4)).unwrap(), Matrix::zeros(4, 4));
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0, 0.0]), vec![1.0 / 3.0; 3]);
        let s = softmax(&[1000.0, 0.0]);
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] >= 0.0 && s[1] < 1e-300);
        let s = softmax(&[1.0, 2.0, 3.0]);
        for (got, want) in s.iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((got - want).abs() < 5e-9);
        }
    }
}
