//! Routing held-out clients into the trained hierarchy.
//!
//! An unseen client trains a throwaway probe adapter on top of the frozen
//! root, takes the top-`r` left singular basis of the probe's `B`, and joins
//! the cluster whose frozen `B` spans the most similar subspace. It then
//! starts from the root + cluster model and fine-tunes a fresh leaf.

use serde::{Deserialize, Serialize};

use crate::datagen::ClientData;
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::federation::{FederationConfig, ServerState};
use crate::lora::{AdapterPath, LoraAdapter, TierId};
use crate::model::{local_update, Anchor, BatchMode, HeadModel, OptimizerConfig, Sample};
use crate::numerics::{frobenius_norm, orthonormal_columns, subspace_overlap, Matrix, DEGENERATE_NORM};
use crate::rng;

const TAG_PROBE: u64 = 20;
const TAG_ADAPT: u64 = 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Full-batch gradient steps for the probe adapter.
    pub probe_steps: usize,
    /// Leaf fine-tuning epochs.
    pub epochs: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            probe_steps: 20,
            epochs: 5,
        }
    }
}

/// Orthonormal basis of a frozen cluster `B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRepresentative {
    pub cluster: usize,
    pub basis: Matrix,
}

pub fn representatives(server: &ServerState, rank: usize) -> Result<Vec<ClusterRepresentative>> {
    server
        .clusters
        .iter()
        .enumerate()
        .map(|(j, c)| {
            Ok(ClusterRepresentative {
                cluster: j,
                basis: orthonormal_columns(c.b(), rank)?,
            })
        })
        .collect()
}

/// Trains a fresh probe adapter for `steps` full-batch steps on top of the
/// frozen `root` (no penalties) and returns its top-`r` `B` basis.
pub fn probe_basis(
    model: &HeadModel,
    root: &LoraAdapter,
    train: &[Sample],
    steps: usize,
    lr: f64,
    init_scale: f64,
    seed: u64,
) -> Result<Matrix> {
    if steps == 0 {
        return Err(Error::config("probe needs at least one step"));
    }
    let r = root.rank();
    let mut rng = rng::stream(seed, &[TAG_PROBE]);
    let mut path = AdapterPath::root_only(root.clone(), 0);
    path.leaf = LoraAdapter::init(root.p(), root.q(), r, init_scale, &mut rng)?;
    let opt = OptimizerConfig {
        lr,
        epochs: steps,
        batch: BatchMode::FullBatch,
    };
    let probe = local_update(model, &path, train, TierId::Leaf(0), &[], &opt, &mut rng)?;
    if frobenius_norm(probe.b()) <= DEGENERATE_NORM {
        return Err(Error::Degenerate("probe adapter stayed at zero".into()));
    }
    orthonormal_columns(probe.b(), r)
}

/// Index maximizing `‖U_uᵀU_j‖_F² / r` (lowest on ties) and all scores.
pub fn assign_cluster(u_u: &Matrix, reps: &[ClusterRepresentative]) -> Result<(usize, Vec<f64>)> {
    if reps.is_empty() {
        return Err(Error::config("no cluster representatives"));
    }
    let r = u_u.cols() as f64;
    let scores = reps
        .iter()
        .map(|rep| Ok(subspace_overlap(u_u, &rep.basis)? / r))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = j;
        }
    }
    Ok((reps[best].cluster, scores))
}

/// Result of routing and fine-tuning one unseen client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptOutcome {
    pub client_id: usize,
    pub assigned_cluster: usize,
    pub scores: Vec<f64>,
    /// Test accuracy after `0..=epochs` epochs; entry 0 is root + cluster.
    pub trajectory: Vec<f64>,
    pub leaf: LoraAdapter,
}

pub fn adapt_unseen(
    cfg: &FederationConfig,
    adapt: &AdaptConfig,
    model: &HeadModel,
    client: &ClientData,
    server: &ServerState,
) -> Result<AdaptOutcome> {
    let id = client.id as u64;
    let u = probe_basis(
        model,
        &server.root,
        &client.train,
        adapt.probe_steps,
        cfg.lr,
        cfg.init_scale,
        rng::derive_seed(cfg.master_seed, &[id]),
    )?;
    let reps = representatives(server, cfg.rank)?;
    let (j, scores) = assign_cluster(&u, &reps)?;
    let mut path = server.cluster_path(j, client.id)?;
    path.leaf = LoraAdapter::init(
        model.classes(),
        model.hidden(),
        cfg.rank,
        cfg.init_scale,
        &mut rng::stream(cfg.master_seed, &[TAG_ADAPT, id]),
    )?;
    let mut trajectory = vec![accuracy(model, &path, &client.test)?];
    let anchors = [
        Anchor::new(server.root.b(), cfg.gamma_c),
        Anchor::new(server.clusters[j].b(), cfg.gamma_l),
    ];
    let opt = OptimizerConfig {
        epochs: 1,
        ..cfg.optimizer()
    };
    for epoch in 1..=adapt.epochs {
        let mut rng = rng::stream(cfg.master_seed, &[TAG_ADAPT, id, epoch as u64]);
        path.leaf = local_update(
            model,
            &path,
            &client.train,
            TierId::Leaf(client.id),
            &anchors,
            &opt,
            &mut rng,
        )?;
        trajectory.push(accuracy(model, &path, &client.test)?);
    }
    Ok(AdaptOutcome {
        client_id: client.id,
        assigned_cluster: j,
        scores,
        trajectory,
        leaf: path.leaf,
    })
}
