//! Dense linear-algebra kernels and subspace metrics.
//!
//! Everything here is a pure function of its inputs and safe to call from
//! any thread; `Mat` values are immutable once constructed.

mod eig;
mod mat;
mod svd;

pub use eig::{sym_eig, EigPair};
pub use mat::{bits_digest, Mat};
pub use svd::{pseudoinverse, singular_values, svd, Svd, DEFAULT_SVD_TOL};

use crate::error::{Error, Result};

/// Minimum-Frobenius-norm feature correction: the unique `df` with
/// `df * w^T = delta_y` and no component outside the row space of `w`.
///
/// `w` is C x L, `delta_y` is B x C; the result is B x L.
pub fn least_norm_delta(w: &Mat, delta_y: &Mat) -> Result<Mat> {
    if delta_y.cols() != w.rows() {
        return Err(Error::dimension(format!(
            "delta_y has {} columns but the classifier has {} rows",
            delta_y.cols(),
            w.rows()
        )));
    }
    let pinv_wt = pseudoinverse(&w.transpose(), DEFAULT_SVD_TOL)?;
    Ok(delta_y.matmul(&pinv_wt))
}

/// Number of singular values above `tol * sigma_max`.
pub fn numerical_rank(a: &Mat, tol: f64) -> Result<usize> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::config(format!("rank tolerance must be in (0, 1), got {tol}")));
    }
    let sv = singular_values(a)?;
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * smax).count())
}

/// Mean squared cosine of the principal angles between two orthonormal
/// bases of equal shape: `||va^T vb||_F^2 / r`. 1 iff the spans coincide,
/// 0 iff they are orthogonal; invariant to rotations within each basis.
pub fn subspace_similarity(va: &Mat, vb: &Mat) -> Result<f64> {
    if va.rows() != vb.rows() || va.cols() != vb.cols() {
        return Err(Error::dimension(format!(
            "basis shapes differ: {}x{} vs {}x{}",
            va.rows(),
            va.cols(),
            vb.rows(),
            vb.cols()
        )));
    }
    for (name, v) in [("first", va), ("second", vb)] {
        let dev = v.orthonormal_deviation();
        if dev > 1e-6 {
            let _ = name;
            return Err(Error::Orthonormality { deviation: dev, limit: 1e-6 });
        }
    }
    let m = va.matmul_tn(vb);
    let r = va.cols() as f64;
    Ok((m.frobenius_norm().powi(2) / r).clamp(0.0, 1.0))
}

/// Cumulative spectral energy `kappa(k)` of a non-increasing eigenvalue
/// array: the fraction of the total eigenvalue sum captured by the top k.
///
/// Small negative values (round-off from an eigensolver) down to -1e-10 are
/// clamped to zero; anything more negative is an error.
pub fn cumulative_spectral_energy(values: &[f64], k: usize) -> Result<f64> {
    if values.is_empty() || k == 0 || k > values.len() {
        return Err(Error::dimension(format!(
            "k must be in [1, {}], got {k}",
            values.len()
        )));
    }
    let mut clamped = Vec::with_capacity(values.len());
    for &v in values {
        if v < -1e-10 {
            return Err(Error::numerical(format!("eigenvalue {v} below clamp threshold")));
        }
        clamped.push(v.max(0.0));
    }
    // Identical accumulation order for numerator and denominator, so that
    // kappa(L) is exactly 1.
    let mut partial = 0.0;
    let mut total = 0.0;
    for (i, &v) in clamped.iter().enumerate() {
        total += v;
        if i < k {
            partial = total;
        }
    }
    if total <= 0.0 {
        return Err(Error::DegenerateSpectrum);
    }
    Ok(partial / total)
}

/// Modified Gram-Schmidt orthonormalization of the columns of `v`.
/// Fails if the columns are (numerically) linearly dependent.
pub fn orthonormalize_columns(v: &Mat) -> Result<Mat> {
    let n = v.rows();
    let r = v.cols();
    let mut cols: Vec<Vec<f64>> = (0..r).map(|j| v.col(j)).collect();
    for j in 0..r {
        for i in 0..j {
            let proj: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            for k in 0..n {
                cols[j][k] -= proj * cols[i][k];
            }
        }
        let nrm: f64 = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm < 1e-12 {
            return Err(Error::Orthonormality { deviation: f64::INFINITY, limit: 1e-6 });
        }
        for x in cols[j].iter_mut() {
            *x /= nrm;
        }
    }
    Ok(Mat::from_fn(n, r, |i, j| cols[j][i]))
}

/// Frobenius norm of the projection of each row of `x` onto the orthogonal
/// complement of the column span of `v` (which must have orthonormal
/// columns). Zero iff every row of `x` lies in span(v).
pub fn residual_outside_span(x: &Mat, v: &Mat) -> f64 {
    let coords = x.matmul(v); // rows x r
    let back = coords.matmul_nt(v); // rows x n
    x.sub(&back).frobenius_norm()
}
