//! Grouping clients by the subspaces spanned by their LoRA `B` factors.
//!
//! Each client's root-stage `B` is smoothed by an exponential moving average
//! of its unit-norm versions. After the root stage the smoothed factors are
//! orthonormalized, compared by principal angles
//! (`d_ij = 1 − ‖U_iᵀU_j‖_F² / r`), turned into a Gaussian affinity with
//! median bandwidth, and split by normalized spectral clustering with the
//! cluster count chosen at the largest eigengap.

mod kmeans;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    frobenius_norm, normalize_frobenius, orthonormal_columns, subspace_overlap, symmetric_eigen,
    Matrix, DEGENERATE_NORM,
};

/// Per-client exponential moving average of unit-norm `B` factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisTracker {
    lambda: f64,
    bases: Vec<Option<Matrix>>,
    updates: Vec<usize>,
}

impl BasisTracker {
    pub fn new(clients: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::config(format!("EMA decay must be in (0, 1), got {lambda}")));
        }
        Ok(Self {
            lambda,
            bases: vec![None; clients],
            updates: vec![0; clients],
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    /// Smoothed basis of `client`, if it has been observed.
    pub fn basis(&self, client: usize) -> Option<&Matrix> {
        self.bases.get(client).and_then(Option::as_ref)
    }

    pub fn updates(&self, client: usize) -> usize {
        self.updates.get(client).copied().unwrap_or(0)
    }

    /// `B̄ ← normalize(λ·B̄ + (1−λ)·B/‖B‖_F)`; the first observation is
    /// stored as `B/‖B‖_F`.
    pub fn ema_update(&mut self, client: usize, b_new: &Matrix) -> Result<()> {
        let slot = self
            .bases
            .get_mut(client)
            .ok_or_else(|| Error::config(format!("client {client} is not tracked")))?;
        let b_hat = normalize_frobenius(b_new)?;
        let next = match slot.take() {
            None => b_hat,
            Some(prev) => {
                if prev.shape() != b_hat.shape() {
                    return Err(Error::dims("ema_update", prev.shape(), b_hat.shape()));
                }
                let mut mix = prev.scale(self.lambda);
                mix.add_scaled(1.0 - self.lambda, &b_hat)?;
                // Opposite-sign inputs can cancel; keep the new direction then.
                if frobenius_norm(&mix) <= DEGENERATE_NORM {
                    b_hat
                } else {
                    normalize_frobenius(&mix)?
                }
            }
        };
        *slot = Some(next);
        self.updates[client] += 1;
        Ok(())
    }
}

/// `1 − ‖U_iᵀU_j‖_F² / r`, clamped to `[0, 1]`.
pub fn pairwise_distance(u_i: &Matrix, u_j: &Matrix) -> Result<f64> {
    if u_i.cols() != u_j.cols() {
        return Err(Error::dims("pairwise_distance", u_i.shape(), u_j.shape()));
    }
    let r = u_i.cols() as f64;
    Ok((1.0 - subspace_overlap(u_i, u_j)? / r).clamp(0.0, 1.0))
}

/// Symmetric client-client distances with zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix(pub Matrix);

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Off-diagonal entries `d_ij` with `i < j`.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.0[(i, j)])
            .collect()
    }
}

/// Layer-averaged principal-angle distances. `bases[i][l]` is client `i`'s
/// orthonormal basis at layer `l`.
pub fn distance_matrix(bases: &[Vec<Matrix>]) -> Result<DistanceMatrix> {
    let n = bases.len();
    let layers = bases.first().map_or(0, Vec::len);
    if layers == 0 {
        return Err(Error::config("distance_matrix needs at least one client and one layer"));
    }
    if bases.iter().any(|b| b.len() != layers) {
        return Err(Error::config("distance_matrix: clients expose different layer counts"));
    }
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let mut total = 0.0;
            for (u_i, u_j) in bases[i].iter().zip(&bases[j]) {
                total += pairwise_distance(u_i, u_j)?;
            }
            let v = total / layers as f64;
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(DistanceMatrix(d))
}

/// Gaussian affinity and the bandwidth it was built with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affinity {
    pub s: Matrix,
    pub sigma: f64,
    /// All off-diagonal distances were zero; `s` is all ones.
    pub degenerate: bool,
}

/// Median, averaging the two middle values for even counts.
fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `S_ij = exp(−d_ij² / (2σ²))` with `σ` the median off-diagonal distance.
pub fn affinity(d: &DistanceMatrix) -> Result<Affinity> {
    let n = d.len();
    if n < 2 {
        return Err(Error::precondition("affinity needs at least two clients"));
    }
    let sigma = median(d.off_diagonal());
    if sigma <= 0.0 {
        return Ok(Affinity {
            s: Matrix::from_fn(n, n, |_, _| 1.0),
            sigma,
            degenerate: true,
        });
    }
    let s = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            let v = d.0[(i, j)];
            (-v * v / (2.0 * sigma * sigma)).exp()
        }
    });
    Ok(Affinity {
        s,
        sigma,
        degenerate: false,
    })
}

fn check_affinity(s: &Matrix) -> Result<()> {
    let n = s.rows();
    if n != s.cols() || n == 0 {
        return Err(Error::dims("affinity", s.shape(), s.shape()));
    }
    for i in 0..n {
        for j in 0..n {
            // Far pairs may underflow to zero; the unit diagonal keeps degrees positive.
            let v = s[(i, j)];
            if v.is_nan() || v < 0.0 || (i == j && v <= 0.0) {
                return Err(Error::precondition("affinity entries must be nonnegative with a positive diagonal"));
            }
            if (s[(i, j)] - s[(j, i)]).abs() > 1e-12 {
                return Err(Error::precondition("affinity must be symmetric"));
            }
        }
    }
    Ok(())
}

/// `L_sym = I − D^{−1/2} S D^{−1/2}` with `D = diag(row sums of S)`.
pub fn normalized_laplacian(s: &Matrix) -> Result<Matrix> {
    check_affinity(s)?;
    let n = s.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / s.row(i).iter().sum::<f64>().sqrt())
        .collect();
    Ok(Matrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * s[(i, j)] * inv_sqrt[j]
    }))
}

/// Eigenvalues of `L_sym`, ascending.
pub fn laplacian_eigenvalues(s: &Matrix) -> Result<Vec<f64>> {
    Ok(symmetric_eigen(&normalized_laplacian(s)?)?.values)
}

/// Eigengap selection over `[k_min, k_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k_star: usize,
    /// `λ_{K+1} − λ_K` for `K = k_min..=k_max`.
    pub eigengaps: Vec<f64>,
    /// Full ascending spectrum of `L_sym`.
    pub eigenvalues: Vec<f64>,
}

/// Picks `K` maximizing `λ_{K+1} − λ_K`, the smallest `K` on ties.
pub fn select_k(s: &Matrix, k_min: usize, k_max: usize) -> Result<KSelection> {
    let n = s.rows();
    if !(2 <= k_min && k_min <= k_max && k_max < n) {
        return Err(Error::precondition(format!(
            "select_k needs 2 ≤ k_min ≤ k_max ≤ N−1, got [{k_min}, {k_max}] with N = {n}"
        )));
    }
    let eigenvalues = laplacian_eigenvalues(s)?;
    // λ_K is eigenvalues[K − 1].
    let eigengaps: Vec<f64> = (k_min..=k_max)
        .map(|k| eigenvalues[k] - eigenvalues[k - 1])
        .collect();
    let mut best = 0;
    for (idx, &g) in eigengaps.iter().enumerate() {
        if g > eigengaps[best] {
            best = idx;
        }
    }
    Ok(KSelection {
        k_star: k_min + best,
        eigengaps,
        eigenvalues,
    })
}

/// Normalized spectral clustering into `k` groups. Labels are 0-based and
/// numbered by first appearance.
pub fn spectral_cluster(s: &Matrix, k: usize) -> Result<Vec<usize>> {
    check_affinity(s)?;
    let n = s.rows();
    if k == 0 || k > n {
        return Err(Error::config(format!("cannot form {k} clusters from {n} clients")));
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }
    let eig = symmetric_eigen(&normalized_laplacian(s)?)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..k).map(|c| eig.vectors[(i, c)]).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.into_iter().map(|v| v / norm).collect()
            } else {
                row
            }
        })
        .collect();
    Ok(kmeans::kmeans(&rows, k))
}

/// Clustering outcome with its diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster count chosen by the eigengap rule.
    pub k_star: usize,
    /// 0-based cluster of every participating client.
    pub labels: Vec<usize>,
    pub eigengaps: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub sigma: f64,
    pub distance_matrix: Matrix,
    pub affinity: Matrix,
    /// Set when clustering fell back to a single group.
    pub fallback: Option<String>,
}

impl ClusterAssignment {
    /// A single cluster holding every client.
    pub fn single(n: usize, reason: impl Into<String>) -> Self {
        Self {
            k_star: 1,
            labels: vec![0; n],
            eigengaps: Vec::new(),
            eigenvalues: Vec::new(),
            sigma: 0.0,
            distance_matrix: Matrix::zeros(n, n),
            affinity: Matrix::from_fn(n, n, |_, _| 1.0),
            fallback: Some(reason.into()),
        }
    }

    /// Number of non-empty clusters actually formed.
    pub fn cluster_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Clients of cluster `j`, ascending.
    pub fn members(&self, j: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == j).collect()
    }
}

/// The full pipeline on a tracker's smoothed bases.
///
/// `k_max` is clamped to `N − 1`. With fewer than three clients, or when all
/// bases coincide (`σ = 0`), every client lands in one cluster and the
/// reason is recorded in `fallback`.
pub fn cluster_clients(
    tracker: &BasisTracker,
    rank: usize,
    k_min: usize,
    k_max: usize,
) -> Result<ClusterAssignment> {
    let n = tracker.len();
    let mut bases = Vec::with_capacity(n);
    for i in 0..n {
        let b = tracker
            .basis(i)
            .ok_or_else(|| Error::precondition(format!("client {i} has no tracked basis")))?;
        bases.push(vec![orthonormal_columns(b, rank)?]);
    }
    if n < 3 {
        return Ok(ClusterAssignment::single(n, format!("only {n} clients")));
    }
    let k_max = k_max.min(n - 1);
    if k_min < 2 || k_min > k_max {
        return Err(Error::config(format!(
            "cluster range [{k_min}, {k_max}] is empty for {n} clients"
        )));
    }
    let d = distance_matrix(&bases)?;
    let aff = affinity(&d)?;
    let sel = select_k(&aff.s, k_min, k_max)?;
    let (labels, fallback) = if aff.degenerate {
        (vec![0; n], Some("all client subspaces coincide (sigma = 0)".to_string()))
    } else {
        (spectral_cluster(&aff.s, sel.k_star)?, None)
    };
    Ok(ClusterAssignment {
        k_star: sel.k_star,
        labels,
        eigengaps: sel.eigengaps,
        eigenvalues: sel.eigenvalues,
        sigma: aff.sigma,
        distance_matrix: d.0,
        affinity: aff.s,
        fallback,
    })
}
