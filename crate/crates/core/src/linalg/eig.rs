//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! Jacobi is slower than tridiagonalization+QL for large matrices but it is
//! simple, accurate for small eigenvalues, and — with a fixed sweep order —
//! bit-deterministic, which the subspace-refresh machinery relies on.

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Eigenvalues in non-increasing order plus the matching orthonormal
/// eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigPair {
    /// `values[0] >= values[1] >= ...`
    pub values: Vec<f64>,
    /// n x n matrix whose column `j` is the eigenvector for `values[j]`.
    pub vectors: Mat,
}

const MAX_SWEEPS: usize = 64;

/// Decompose a symmetric matrix. The input is symmetrized as
/// `(g + g^T) / 2` first, so slightly asymmetric accumulators are fine.
///
/// Output is deterministic: eigenvalues are sorted non-increasing with a
/// stable tie order, and each eigenvector is flipped so its first entry
/// with magnitude above 1e-12 is positive.
pub fn sym_eig(g: &Mat) -> Result<EigPair> {
    if g.rows() != g.cols() {
        return Err(Error::dimension(format!(
            "sym_eig needs a square matrix, got {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    let n = g.rows();

    // Symmetrize.
    let mut a = Mat::from_fn(n, n, |i, j| 0.5 * (g.get(i, j) + g.get(j, i)));
    let mut q = Mat::identity(n);

    if n > 1 {
        let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
        let mut converged = false;
        for _ in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n - 1 {
                for qq in p + 1..n {
                    off += a.get(p, qq).powi(2);
                }
            }
            if off.sqrt() <= 1e-14 * scale {
                converged = true;
                break;
            }
            for p in 0..n - 1 {
                for r in p + 1..n {
                    rotate(&mut a, &mut q, p, r);
                }
            }
        }
        if !converged {
            // One final check: the last sweep may have finished the job.
            let mut off = 0.0;
            for p in 0..n - 1 {
                for qq in p + 1..n {
                    off += a.get(p, qq).powi(2);
                }
            }
            if off.sqrt() > 1e-14 * scale {
                return Err(Error::numerical(format!(
                    "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps (off-diagonal {:.3e})",
                    off.sqrt()
                )));
            }
        }
    }

    let raw: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    // Stable sort: ties keep the solver's output order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| raw[j].partial_cmp(&raw[i]).expect("finite eigenvalues"));

    let values: Vec<f64> = order.iter().map(|&i| raw[i]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        // Sign convention: first entry with |v| > 1e-12 is positive.
        let mut flip = false;
        for i in 0..n {
            let v = q.get(i, old_col);
            if v.abs() > 1e-12 {
                flip = v < 0.0;
                break;
            }
        }
        for i in 0..n {
            let v = q.get(i, old_col);
            vectors.set(i, new_col, if flip { -v } else { v });
        }
    }

    Ok(EigPair { values, vectors })
}

/// One Jacobi rotation zeroing `a[p][r]`, accumulated into `q`.
fn rotate(a: &mut Mat, q: &mut Mat, p: usize, r: usize) {
    let apr = a.get(p, r);
    if apr == 0.0 {
        return;
    }
    let app = a.get(p, p);
    let arr = a.get(r, r);
    // Skip rotations that cannot change anything at working precision.
    if apr.abs() <= 1e-300 || apr.abs() * 1e18 < (app.abs() + arr.abs()) {
        a.set(p, r, 0.0);
        a.set(r, p, 0.0);
        return;
    }
    let theta = (arr - app) / (2.0 * apr);
    let t = if theta >= 0.0 {
        1.0 / (theta + (1.0 + theta * theta).sqrt())
    } else {
        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let tau = s / (1.0 + c);

    a.set(p, p, app - t * apr);
    a.set(r, r, arr + t * apr);
    a.set(p, r, 0.0);
    a.set(r, p, 0.0);

    let n = a.rows();
    for i in 0..n {
        if i != p && i != r {
            let aip = a.get(i, p);
            let air = a.get(i, r);
            let new_p = aip - s * (air + tau * aip);
            let new_r = air + s * (aip - tau * air);
            a.set(i, p, new_p);
            a.set(p, i, new_p);
            a.set(i, r, new_r);
            a.set(r, i, new_r);
        }
    }
    for i in 0..n {
        let qip = q.get(i, p);
        let qir = q.get(i, r);
        q.set(i, p, qip - s * (qir + tau * qip));
        q.set(i, r, qir + s * (qip - tau * qir));
    }
}

impl EigPair {
    /// Columns for the `r` largest eigenvalues, as an n x r matrix.
    pub fn top_vectors(&self, r: usize) -> Mat {
        let n = self.vectors.rows();
        assert!(r >= 1 && r <= n, "rank out of range");
        Mat::from_fn(n, r, |i, j| self.vectors.get(i, j))
    }

    /// `Q diag(values) Q^T`, for reconstruction checks.
    pub fn reconstruct(&self) -> Mat {
        let lam = Mat::diag(&self.values);
        self.vectors.matmul(&lam).matmul_nt(&self.vectors)
    }
}
