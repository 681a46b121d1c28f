//! Deterministic dense linear algebra.

mod eigen;
mod matrix;
mod svd;

pub use eigen::{symmetric_eigen, SymmetricEigen};
pub use matrix::{frobenius_norm, matmul, matmul_nt, matmul_tn, Matrix};
pub use svd::{orthonormal_columns, truncated_svd, SvdFactors};

use crate::error::{Error, Result};

/// Frobenius norms at or below this are treated as zero wherever a matrix
/// has to be normalized.
pub const DEGENERATE_NORM: f64 = 1e-300;

/// Tolerance used when checking that a basis has orthonormal columns.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Whether `uᵀu` is the identity to within `tol` entrywise.
pub fn has_orthonormal_columns(u: &Matrix, tol: f64) -> bool {
    match matmul_tn(u, u) {
        Ok(g) => (0..g.rows()).all(|i| {
            (0..g.cols()).all(|j| {
                let target = if i == j { 1.0 } else { 0.0 };
                (g[(i, j)] - target).abs() <= tol
            })
        }),
        Err(_) => false,
    }
}

/// `‖u1ᵀu2‖_F²`, the sum of squared cosines of the principal angles between
/// the column spaces of two orthonormal bases.
pub fn subspace_overlap(u1: &Matrix, u2: &Matrix) -> Result<f64> {
    if u1.rows() != u2.rows() {
        return Err(Error::dims("subspace_overlap", u1.shape(), u2.shape()));
    }
    if !has_orthonormal_columns(u1, ORTHONORMAL_TOL) || !has_orthonormal_columns(u2, ORTHONORMAL_TOL)
    {
        return Err(Error::precondition(
            "subspace_overlap: inputs must have orthonormal columns",
        ));
    }
    let cross = matmul_tn(u1, u2)?;
    let overlap = frobenius_norm(&cross).powi(2);
    Ok(overlap.min(u1.cols().min(u2.cols()) as f64))
}

/// Scales `m` to unit Frobenius norm.
pub fn normalize_frobenius(m: &Matrix) -> Result<Matrix> {
    let norm = frobenius_norm(m);
    if norm <= DEGENERATE_NORM {
        return Err(Error::Degenerate("cannot normalize a zero matrix".into()));
    }
    Ok(m.scale(1.0 / norm))
}
