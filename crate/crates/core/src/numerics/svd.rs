//! One-sided (Hestenes) Jacobi SVD.
//!
//! The sweep order is fixed, so identical inputs always produce bitwise
//! identical factors. Left singular vectors are sign-normalized so that the
//! largest-magnitude entry is positive (lowest row index on ties).

use serde::{Deserialize, Serialize};

use super::matrix::{matmul, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;
const ROTATION_TOL: f64 = 1e-12;

/// Top-k singular triplets of a matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    /// `p × k`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, nonnegative.
    pub singular_values: Vec<f64>,
    /// `k × q`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    /// `u · diag(σ) · vt`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.singular_values.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        matmul(&us, &self.vt).expect("svd factors are conformant")
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }
}

/// Top-`k` singular triplets of `m`; the reconstruction is a best rank-`k`
/// approximation in Frobenius norm.
pub fn truncated_svd(m: &Matrix, k: usize) -> Result<SvdFactors> {
    let (p, q) = m.shape();
    if k == 0 || k > p.min(q) {
        return Err(Error::config(format!(
            "truncated_svd: rank {k} out of range for {p}x{q} matrix"
        )));
    }
    let full = full_svd(m);
    let u = full.u.leading_columns(k);
    let vt = full.vt.transpose().leading_columns(k).transpose();
    Ok(SvdFactors {
        u,
        singular_values: full.singular_values[..k].to_vec(),
        vt,
    })
}

/// Orthonormal basis of the dominant `r`-dimensional left singular subspace.
pub fn orthonormal_columns(m: &Matrix, r: usize) -> Result<Matrix> {
    Ok(truncated_svd(m, r)?.u)
}

/// Thin SVD with `min(p, q)` triplets.
fn full_svd(m: &Matrix) -> SvdFactors {
    let (p, q) = m.shape();
    let transposed = p < q;
    let tall = if transposed { m.transpose() } else { m.clone() };
    let (rows, n) = tall.shape();

    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| tall.column(j)).collect();
    let mut rot: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, i, j, c, s);
                rotate_pair(&mut rot, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal singular values keep their sweep order.
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));

    let sigma_max = norms.iter().cloned().fold(0.0, f64::max);
    let negligible = (sigma_max * rows as f64 * f64::EPSILON).max(1e-300);

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    // Normalized rotated columns live in the tall space; rotation columns in
    // the short one.
    let mut tall_vecs: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            (norms[j] > negligible).then(|| cols[j].iter().map(|v| v / norms[j]).collect())
        })
        .collect();
    complete_basis(&mut tall_vecs, rows);
    let tall_vecs: Vec<Vec<f64>> = tall_vecs.into_iter().map(|v| v.expect("completed")).collect();
    let short_vecs: Vec<Vec<f64>> = order.iter().map(|&j| rot[j].clone()).collect();

    let (mut left, mut right) = if transposed {
        (short_vecs, tall_vecs)
    } else {
        (tall_vecs, short_vecs)
    };

    for (u, v) in left.iter_mut().zip(right.iter_mut()) {
        let mut pivot = 0;
        for (i, x) in u.iter().enumerate() {
            if x.abs() > u[pivot].abs() {
                pivot = i;
            }
        }
        if u[pivot] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let u = Matrix::from_columns(&left).expect("nonempty");
    let vt = Matrix::from_columns(&right).expect("nonempty").transpose();
    SvdFactors {
        u,
        singular_values: sigma,
        vt,
    }
}

/// Fills missing entries with unit vectors orthogonal to all others, taking
/// the standard basis vector with the largest residual each time.
fn complete_basis(vecs: &mut [Option<Vec<f64>>], dim: usize) {
    for slot in 0..vecs.len() {
        if vecs[slot].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[e] = 1.0;
            // Two passes of Gram-Schmidt.
            for _ in 0..2 {
                for other in vecs.iter().flatten() {
                    let proj = dot(&cand, other);
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= proj * o;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(n, _)| norm > *n) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("dim > 0");
        vecs[slot] = Some(cand.into_iter().map(|c| c / norm).collect());
    }
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(j);
    let (ci, cj) = (&mut head[i], &mut tail[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
