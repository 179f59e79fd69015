//! Singular value decomposition by one-sided Jacobi (Hestenes) rotations,
//! and the Moore–Penrose pseudoinverse built on top of it.
//!
//! One-sided Jacobi orthogonalizes pairs of columns of the working matrix;
//! it computes small singular values to high relative accuracy, which keeps
//! the Penrose-condition checks tight even for skinny or ill-scaled inputs.

use crate::error::{Error, Result};
use crate::linalg::mat::{dot, norm};
use crate::linalg::Mat;

/// Compact SVD `a = u * diag(sigma) * v^T` with `k = min(rows, cols)`.
///
/// `sigma` is non-increasing. Columns of `u` whose singular value is exactly
/// zero are left as zero vectors.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v: Mat,
}

const MAX_SWEEPS: usize = 60;

pub fn svd(a: &Mat) -> Result<Svd> {
    if a.rows() >= a.cols() {
        svd_tall(a)
    } else {
        let s = svd_tall(&a.transpose())?;
        Ok(Svd { u: s.v, sigma: s.sigma, v: s.u })
    }
}

/// One-sided Jacobi on a matrix with rows >= cols.
fn svd_tall(a: &Mat) -> Result<Svd> {
    let m = a.rows();
    let n = a.cols();
    // Work on columns: b[j] is the j-th column of the evolving matrix.
    let mut b: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n <= 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut max_cos = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&b[p], &b[p]);
                let beta = dot(&b[q], &b[q]);
                let gamma = dot(&b[p], &b[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let cos_angle = gamma.abs() / (alpha * beta).sqrt();
                max_cos = max_cos.max(cos_angle);
                if cos_angle <= 1e-15 {
                    continue;
                }
                // Rotation orthogonalizing columns p and q.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let bp = b[p][i];
                    let bq = b[q][i];
                    b[p][i] = c * bp - s * bq;
                    b[q][i] = s * bp + c * bq;
                }
                for i in 0..n {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if max_cos <= 1e-14 {
            converged = true;
        }
    }
    if !converged {
        // Check residual orthogonality once more before giving up.
        let mut worst = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&b[p], &b[p]);
                let beta = dot(&b[q], &b[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                worst = worst.max(dot(&b[p], &b[q]).abs() / (alpha * beta).sqrt());
            }
        }
        if worst > 1e-10 {
            return Err(Error::numerical(format!(
                "one-sided Jacobi SVD did not converge in {MAX_SWEEPS} sweeps (cos {worst:.3e})"
            )));
        }
    }

    let mut sigma: Vec<f64> = b.iter().map(|col| norm(col)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).expect("finite singular values"));

    let mut u = Mat::zeros(m, n);
    let mut vmat = Mat::zeros(n, n);
    let mut sorted_sigma = Vec::with_capacity(n);
    for (new_j, &old_j) in order.iter().enumerate() {
        let s = sigma[old_j];
        sorted_sigma.push(s);
        // Sign convention on v: first entry with |x| > 1e-12 positive;
        // flip u with it so the product is unchanged.
        let mut flip = false;
        for &x in &v[old_j] {
            if x.abs() > 1e-12 {
                flip = x < 0.0;
                break;
            }
        }
        let fsgn = if flip { -1.0 } else { 1.0 };
        for i in 0..n {
            vmat.set(i, new_j, fsgn * v[old_j][i]);
        }
        if s > 0.0 {
            for i in 0..m {
                u.set(i, new_j, fsgn * b[old_j][i] / s);
            }
        }
    }
    sigma = sorted_sigma;

    Ok(Svd { u, sigma, v: vmat })
}

pub fn singular_values(a: &Mat) -> Result<Vec<f64>> {
    Ok(svd(a)?.sigma)
}

/// Moore–Penrose pseudoinverse. Singular values at or below
/// `tol * sigma_max` are treated as zero.
pub fn pseudoinverse(a: &Mat, tol: f64) -> Result<Mat> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::config(format!("pseudoinverse tolerance must be in (0, 1), got {tol}")));
    }
    let dec = svd(a)?;
    let smax = dec.sigma.first().copied().unwrap_or(0.0);
    let cutoff = tol * smax;
    let mut out = Mat::zeros(a.cols(), a.rows());
    for (j, &s) in dec.sigma.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..a.cols() {
            let vij = dec.v.get(i, j) * inv;
            if vij == 0.0 {
                continue;
            }
            for k in 0..a.rows() {
                let val = out.get(i, k) + vij * dec.u.get(k, j);
                out.set(i, k, val);
            }
        }
    }
    Ok(out)
}

/// Default relative singular-value cutoff.
pub const DEFAULT_SVD_TOL: f64 = 1e-12;
