//! Low-rank adapters and their composition along a client's tier path.
//!
//! An adapter holds `B ∈ R^{p×r}` and `A ∈ R^{r×q}` and contributes
//! `ΔW = B·A`. A client's effective weight is `W0` plus the root, cluster
//! and leaf deltas on its path.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix};

/// One `(B, A)` factor pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    b: Matrix,
    a: Matrix,
}

impl LoraAdapter {
    pub fn new(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::config(format!(
                "adapter rank mismatch: B is {}x{}, A is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        if b.cols() > b.rows().min(a.cols()) {
            return Err(Error::config(format!(
                "adapter rank {} exceeds min({}, {})",
                b.cols(),
                b.rows(),
                a.cols()
            )));
        }
        Ok(Self { b, a })
    }

    /// Both factors zero.
    pub fn zeros(p: usize, q: usize, r: usize) -> Result<Self> {
        Self::new(Matrix::zeros(p, r), Matrix::zeros(r, q))
    }

    /// Stage-start initialization: `B = 0` and `A` Gaussian with standard
    /// deviation `scale / √q`, so the adapter contributes nothing until it
    /// is trained.
    pub fn init(p: usize, q: usize, r: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let std = scale / (q as f64).sqrt();
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::config(format!("invalid init scale {scale}: {e}")))?;
        let a = Matrix::from_fn(r, q, |_, _| normal.sample(rng));
        Self::new(Matrix::zeros(p, r), a)
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// Output dimension `p`.
    pub fn p(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `q`.
    pub fn q(&self) -> usize {
        self.a.cols()
    }

    /// `ΔW = B·A`.
    pub fn delta(&self) -> Matrix {
        matmul(&self.b, &self.a).expect("adapter factors are conformant")
    }

    /// Writes the checkpoint layout described in [`write_adapter`].
    pub fn write_to(&self, w: impl Write) -> Result<()> {
        write_adapter(self, w)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        read_adapter(r)
    }
}

/// Position of an adapter in the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TierId {
    Root,
    Cluster(usize),
    Leaf(usize),
}

/// A client's root → cluster → leaf adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPath {
    pub root: LoraAdapter,
    pub cluster: LoraAdapter,
    pub leaf: LoraAdapter,
    pub cluster_index: usize,
    pub client_index: usize,
}

impl AdapterPath {
    pub fn new(
        root: LoraAdapter,
        cluster: LoraAdapter,
        leaf: LoraAdapter,
        cluster_index: usize,
        client_index: usize,
    ) -> Result<Self> {
        let dims = (root.p(), root.q());
        for (name, ad) in [("cluster", &cluster), ("leaf", &leaf)] {
            if (ad.p(), ad.q()) != dims {
                return Err(Error::config(format!(
                    "{name} adapter is {}x{}, root is {}x{}",
                    ad.p(),
                    ad.q(),
                    dims.0,
                    dims.1
                )));
            }
        }
        Ok(Self {
            root,
            cluster,
            leaf,
            cluster_index,
            client_index,
        })
    }

    /// A path with only `root` populated; cluster and leaf are zero adapters.
    pub fn root_only(root: LoraAdapter, client_index: usize) -> Self {
        let zero = LoraAdapter::zeros(root.p(), root.q(), root.rank()).expect("root dims valid");
        Self {
            cluster: zero.clone(),
            leaf: zero,
            root,
            cluster_index: 0,
            client_index,
        }
    }

    /// The path with its leaf replaced by a zero adapter.
    pub fn without_leaf(&self) -> Self {
        let mut p = self.clone();
        p.leaf = LoraAdapter::zeros(p.leaf.p(), p.leaf.q(), p.leaf.rank()).expect("dims valid");
        p
    }

    /// The path with cluster and leaf replaced by zero adapters.
    pub fn root_snapshot(&self) -> Self {
        let mut p = self.without_leaf();
        p.cluster = p.leaf.clone();
        p
    }

    pub fn tier(&self, tier: TierId) -> Result<&LoraAdapter> {
        match tier {
            TierId::Root => Ok(&self.root),
            TierId::Cluster(j) if j == self.cluster_index => Ok(&self.cluster),
            TierId::Leaf(i) if i == self.client_index => Ok(&self.leaf),
            other => Err(Error::config(format!(
                "tier {other:?} is not on the path of client {} (cluster {})",
                self.client_index, self.cluster_index
            ))),
        }
    }

    pub fn tier_mut(&mut self, tier: TierId) -> Result<&mut LoraAdapter> {
        match tier {
            TierId::Root => Ok(&mut self.root),
            TierId::Cluster(j) if j == self.cluster_index => Ok(&mut self.cluster),
            TierId::Leaf(i) if i == self.client_index => Ok(&mut self.leaf),
            other => Err(Error::config(format!(
                "tier {other:?} is not on the path of client {} (cluster {})",
                self.client_index, self.cluster_index
            ))),
        }
    }

    /// Sum of the three tier deltas.
    pub fn delta(&self) -> Matrix {
        let mut d = self.root.delta();
        d.add_scaled(1.0, &self.cluster.delta()).expect("path dims validated");
        d.add_scaled(1.0, &self.leaf.delta()).expect("path dims validated");
        d
    }
}

/// `W0 + ΔW_root + ΔW_cluster + ΔW_leaf`.
pub fn compose_path(path: &AdapterPath, w0: &Matrix) -> Result<Matrix> {
    if w0.shape() != (path.root.p(), path.root.q()) {
        return Err(Error::dims(
            "compose_path",
            w0.shape(),
            (path.root.p(), path.root.q()),
        ));
    }
    let mut w = w0.clone();
    for adapter in [&path.root, &path.cluster, &path.leaf] {
        w.add_scaled(1.0, &adapter.delta())?;
    }
    Ok(w)
}

/// Cross-tier orthogonality penalty `‖B_frozenᵀ B_active‖_F²`.
pub fn orth_penalty(b_frozen: &Matrix, b_active: &Matrix) -> Result<f64> {
    let cross = matmul_tn(b_frozen, b_active)?;
    Ok(cross.as_slice().iter().map(|v| v * v).sum())
}

/// Gradient of [`orth_penalty`] with respect to `b_active`:
/// `2 · B_frozen · B_frozenᵀ · B_active`.
pub fn orth_penalty_grad(b_frozen: &Matrix, b_active: &Matrix) -> Result<Matrix> {
    let cross = matmul_tn(b_frozen, b_active)?;
    Ok(matmul(b_frozen, &cross)?.scale(2.0))
}

/// `B_frozen · B_frozenᵀ`, cached by callers that apply the penalty
/// gradient many times against a fixed anchor.
pub fn anchor_projector(b_frozen: &Matrix) -> Matrix {
    matmul_nt(b_frozen, b_frozen).expect("conformant")
}

const MAGIC: &[u8; 4] = b"HLRA";
const VERSION: u32 = 1;

/// Serializes an adapter.
///
/// Layout (all little-endian): the 4-byte magic `HLRA`, a `u32` format
/// version (1), then `p`, `q`, `r` as `u64`, followed by the `p·r` entries of
/// `B` and the `r·q` entries of `A`, each row-major as IEEE-754 `f64`.
pub fn write_adapter(adapter: &LoraAdapter, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for dim in [adapter.p(), adapter.q(), adapter.rank()] {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    for v in adapter.b.as_slice().iter().chain(adapter.a.as_slice()) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_adapter(mut r: impl Read) -> Result<LoraAdapter> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an adapter checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        *d = usize::try_from(u64::from_le_bytes(buf))
            .map_err(|_| Error::Format("dimension overflow".into()))?;
    }
    let [p, q, rank] = dims;
    let mut read_block = |n: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let b = Matrix::from_vec(p, rank, read_block(p * rank)?)?;
    let a = Matrix::from_vec(rank, q, read_block(rank * q)?)?;
    LoraAdapter::new(b, a)
}
