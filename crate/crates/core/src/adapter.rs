//! Residual scaled-projection adapter.
//!
//! Features are projected onto the current subspace basis, the coordinates
//! are rescaled by `1 + s`, and the change is added back residually:
//! `A(f) = f + V (s .* (V^T f))`. With `s = 0` the adapter is exactly the
//! identity, which is also its state right after every basis refresh.

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_columns, Mat};

#[derive(Debug, Clone)]
pub struct AdapterState {
    v: Mat, // L x r, orthonormal columns
    s: Vec<f64>,
}

const ORTHO_LIMIT: f64 = 1e-8;

impl AdapterState {
    /// Install an initial basis; the scaling vector starts at zero.
    pub fn new(v: Mat) -> Result<Self> {
        let v = checked_basis(v)?;
        let r = v.cols();
        Ok(AdapterState { v, s: vec![0.0; r] })
    }

    pub fn feature_dim(&self) -> usize {
        self.v.rows()
    }

    pub fn rank(&self) -> usize {
        self.v.cols()
    }

    pub fn basis(&self) -> &Mat {
        &self.v
    }

    pub fn scaling(&self) -> &[f64] {
        &self.s
    }

    pub fn scaling_mut(&mut self) -> &mut [f64] {
        &mut self.s
    }

    /// Coordinates of each feature row in the subspace: `f V`.
    pub fn project(&self, f: &Mat) -> Result<Mat> {
        if f.cols() != self.feature_dim() {
            return Err(Error::dimension(format!(
                "features have {} columns, adapter expects {}",
                f.cols(),
                self.feature_dim()
            )));
        }
        Ok(f.matmul(&self.v))
    }

    /// `f + (s .* (f V)) V^T`, rowwise. Returns the input bit-for-bit when
    /// the scaling vector is zero.
    pub fn adapt(&self, f: &Mat) -> Result<Mat> {
        if f.cols() != self.feature_dim() {
            return Err(Error::dimension(format!(
                "features have {} columns, adapter expects {}",
                f.cols(),
                self.feature_dim()
            )));
        }
        if self.s.iter().all(|&x| x == 0.0) {
            return Ok(f.clone());
        }
        let u = f.matmul(&self.v);
        let scaled = scale_columns(&u, &self.s);
        Ok(f.add(&scaled.matmul_nt(&self.v)))
    }

    /// Replace the basis; the scaling vector resets to zero because its
    /// coordinates are meaningless in the new basis.
    pub fn set_basis(&mut self, v_new: Mat) -> Result<()> {
        let v = checked_basis(v_new)?;
        if v.rows() != self.feature_dim() {
            return Err(Error::dimension("new basis has a different feature dimension"));
        }
        self.s = vec![0.0; v.cols()];
        self.v = v;
        Ok(())
    }

    /// Replace the basis but carry the old scaled directions over by
    /// projecting the old operator `V diag(s) V^T` onto the new basis and
    /// keeping its diagonal.
    pub fn set_basis_carry(&mut self, v_new: Mat) -> Result<()> {
        let v = checked_basis(v_new)?;
        if v.rows() != self.feature_dim() {
            return Err(Error::dimension("new basis has a different feature dimension"));
        }
        let cross = v.matmul_tn(&self.v); // r_new x r_old
        let r_new = v.cols();
        let mut s_new = vec![0.0; r_new];
        for (j, slot) in s_new.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &s_old) in self.s.iter().enumerate() {
                let c = cross.get(j, k);
                acc += c * s_old * c;
            }
            *slot = acc;
        }
        self.v = v;
        self.s = s_new;
        Ok(())
    }

    /// `||adapt(f) - f||_F`: zero iff `s = 0` or every row of `f` is
    /// orthogonal to the span of the basis.
    pub fn residual_norm(&self, f: &Mat) -> Result<f64> {
        let adapted = self.adapt(f)?;
        Ok(adapted.sub(f).frobenius_norm())
    }
}

/// Validate near-orthonormality, then scrub eigensolver round-off with one
/// pass of modified Gram-Schmidt.
fn checked_basis(v: Mat) -> Result<Mat> {
    if v.cols() > v.rows() {
        return Err(Error::dimension(format!(
            "basis cannot have more columns ({}) than rows ({})",
            v.cols(),
            v.rows()
        )));
    }
    let dev = v.orthonormal_deviation();
    if dev > ORTHO_LIMIT {
        return Err(Error::Orthonormality { deviation: dev, limit: ORTHO_LIMIT });
    }
    orthonormalize_columns(&v)
}

/// Multiply column `j` of `u` by `s[j]`.
fn scale_columns(u: &Mat, s: &[f64]) -> Mat {
    Mat::from_fn(u.rows(), u.cols(), |i, j| u.get(i, j) * s[j])
}
