//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Only small matrices go through here (the `S × S` and `T × T` Gram
//! matrices of a kernel), so the O(n³) per sweep is not a concern.

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Sweep cap before giving up.
pub const MAX_SWEEPS: usize = 100;

/// Default stopping tolerance, relative to `‖A‖_F`.
pub const DEFAULT_TOL: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct EigResult {
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: DenseMatrix,
}

impl EigResult {
    /// Zero out negative eigenvalues; for PSD input these are roundoff.
    pub fn clamp_nonnegative(mut self) -> Self {
        for v in &mut self.eigenvalues {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self
    }
}

/// Eigendecomposition of a symmetric matrix.
///
/// Iterates cyclic sweeps until the off-diagonal Frobenius mass drops below
/// `tol · ‖A‖_F`. Eigenvalues come back sorted descending; equal eigenvalues
/// keep the order of their diagonal positions.
pub fn sym_eig(a: &DenseMatrix, tol: f64) -> Result<EigResult> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::NotSquare { rows: n, cols: a.cols() });
    }
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }

    let mut m: Vec<f64> = a.data().to_vec();
    let mut v = DenseMatrix::identity(n);
    let target = tol * a.frobenius_norm();

    let off_norm = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_norm(&m) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (kp, kq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * kp - s * kq;
                    m[k * n + q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * pk - s * qk;
                    m[q * n + k] = s * pk + c * qk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                let vd = v.data_mut();
                for k in 0..n {
                    let (kp, kq) = (vd[k * n + p], vd[k * n + q]);
                    vd[k * n + p] = c * kp - s * kq;
                    vd[k * n + q] = s * kp + c * kq;
                }
            }
        }
    }
    if !converged {
        let residual = off_norm(&m);
        if residual > target {
            return Err(Error::NoConvergence { sweeps: MAX_SWEEPS, residual });
        }
    }

    let diag: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));
    let eigenvalues = order.iter().map(|&i| diag[i]).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok(EigResult { eigenvalues, eigenvectors })
}

/// Eigendecomposition of `W Wᵀ` with negative roundoff clamped to zero.
/// The eigenvalues are the squared singular values of `w`.
pub fn gram_eig(w: &DenseMatrix) -> Result<EigResult> {
    Ok(sym_eig(&w.gram(), DEFAULT_TOL)?.clamp_nonnegative())
}
