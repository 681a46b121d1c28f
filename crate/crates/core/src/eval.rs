//! Accuracy metrics, tier gains, clustering quality and subspace diagnostics.
//!
//! Tier gains compare the training loss of successive stage snapshots:
//! `G_c` is the drop from root-only to root + cluster on the union of the
//! cluster's training data, `G_c'` the same drop on the client's own data,
//! and `G_l` the drop from root + cluster to the full path on the client's
//! own data. With zero-initialized adapters and full-batch descent all three
//! should be nonnegative.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::FederationData;
use crate::error::{Error, Result};
use crate::federation::TrainedFederation;
use crate::lora::AdapterPath;
use crate::model::{accuracy_with_weight, dataset_loss, HeadModel, Sample};
use crate::numerics::{frobenius_norm, orthonormal_columns, subspace_overlap, Matrix};

/// Leaves with `‖B‖_F` below this are left out of the overlap statistics.
pub const NEGLIGIBLE_B: f64 = 1e-8;

pub fn accuracy(model: &HeadModel, path: &AdapterPath, test: &[Sample]) -> Result<f64> {
    accuracy_with_weight(model, &model.weight(path)?, test)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean of the lowest `⌈0.1·N⌉` values.
pub fn worst_decile(accs: &[f64]) -> Result<f64> {
    if accs.is_empty() {
        return Err(Error::precondition("worst_decile needs at least one value"));
    }
    let mut sorted = accs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (accs.len() as f64 * 0.1).ceil() as usize;
    Ok(mean(&sorted[..k.max(1)]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierGains {
    /// Over the cluster's pooled training data.
    pub g_c: f64,
    /// Over the client's own training data.
    pub g_c_own: f64,
    pub g_l: f64,
}

/// Gains for client `i` of a trained federation.
pub fn tier_gains(
    model: &HeadModel,
    fed: &TrainedFederation,
    data: &FederationData,
    i: usize,
) -> Result<TierGains> {
    let full = fed.path(i)?;
    let rc = full.without_leaf();
    let r = full.root_snapshot();
    let own = &data
        .clients
        .get(i)
        .ok_or_else(|| Error::config(format!("client {i} does not exist")))?
        .train;
    let pooled: Vec<Sample> = fed
        .server
        .assignment
        .members(full.cluster_index)
        .into_iter()
        .flat_map(|m| data.clients[m].train.iter().cloned())
        .collect();
    let l_rc_own = dataset_loss(model, &rc, own)?;
    Ok(TierGains {
        g_c: dataset_loss(model, &r, &pooled)? - dataset_loss(model, &rc, &pooled)?,
        g_c_own: dataset_loss(model, &r, own)? - l_rc_own,
        g_l: l_rc_own - dataset_loss(model, &full, own)?,
    })
}

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringQuality {
    pub ari: f64,
    pub nmi: f64,
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut ab = BTreeMap::new();
    let mut ba = BTreeMap::new();
    a.iter()
        .zip(b)
        .all(|(x, y)| *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
}

/// Adjusted Rand Index and arithmetic-mean Normalized Mutual Information.
pub fn clustering_quality(labels: &[usize], truth: &[usize]) -> Result<ClusteringQuality> {
    if labels.len() != truth.len() || labels.is_empty() {
        return Err(Error::config("clustering_quality needs equal, non-empty label lists"));
    }
    let n = labels.len();
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&l, &t) in labels.iter().zip(truth) {
        *table.entry((l, t)).or_default() += 1;
        *rows.entry(l).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n).max(f64::MIN_POSITIVE);
    let max = 0.5 * (sum_a + sum_b);
    let ari = if (max - expected).abs() < 1e-12 {
        if same_partition(labels, truth) {
            1.0
        } else {
            0.0
        }
    } else {
        (index - expected) / (max - expected)
    };

    let nf = n as f64;
    let entropy = |m: &BTreeMap<usize, usize>| -> f64 {
        m.values()
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let (h_l, h_t) = (entropy(&rows), entropy(&cols));
    let mi: f64 = table
        .iter()
        .map(|(&(l, t), &c)| {
            let p = c as f64 / nf;
            p * (p * nf * nf / (rows[&l] as f64 * cols[&t] as f64)).ln()
        })
        .sum();
    let nmi = if h_l + h_t == 0.0 {
        1.0
    } else {
        (2.0 * mi / (h_l + h_t)).clamp(0.0, 1.0)
    };
    Ok(ClusteringQuality { ari, nmi })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

impl PairStats {
    fn from_values(v: &[f64]) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        Self {
            mean: mean(v),
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            count: v.len(),
        }
    }
}

/// Normalized overlaps `‖U_aᵀU_b‖_F² / r` of the tier `B` bases along each
/// client path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub root_cluster: PairStats,
    pub root_leaf: PairStats,
    pub cluster_leaf: PairStats,
    /// Leaves left out because their `B` is numerically zero.
    pub excluded_leaves: usize,
}

fn normalized_overlap(a: &Matrix, b: &Matrix, r: usize) -> Result<f64> {
    let ua = orthonormal_columns(a, r)?;
    let ub = orthonormal_columns(b, r)?;
    Ok(subspace_overlap(&ua, &ub)? / r as f64)
}

pub fn orthogonality_report(fed: &TrainedFederation) -> Result<OrthogonalityReport> {
    let r = fed.server.root.rank();
    let (mut rc, mut rl, mut cl) = (Vec::new(), Vec::new(), Vec::new());
    let mut excluded = 0;
    for i in 0..fed.leaves.len() {
        let path = fed.path(i)?;
        let live = |m: &Matrix| frobenius_norm(m) >= NEGLIGIBLE_B;
        let (root, cluster, leaf) = (path.root.b(), path.cluster.b(), path.leaf.b());
        if live(root) && live(cluster) {
            rc.push(normalized_overlap(root, cluster, r)?);
        }
        if !live(leaf) {
            excluded += 1;
            continue;
        }
        if live(root) {
            rl.push(normalized_overlap(root, leaf, r)?);
        }
        if live(cluster) {
            cl.push(normalized_overlap(cluster, leaf, r)?);
        }
    }
    Ok(OrthogonalityReport {
        root_cluster: PairStats::from_values(&rc),
        root_leaf: PairStats::from_values(&rl),
        cluster_leaf: PairStats::from_values(&cl),
        excluded_leaves: excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub cluster: usize,
    /// Test accuracy of the full path.
    pub acc: f64,
    pub acc_root: f64,
    pub acc_root_cluster: f64,
    pub gains: TierGains,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub cluster: usize,
    pub clients: usize,
    pub mean_acc: f64,
}

/// Mean test accuracy of each stage snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAccuracy {
    pub root: f64,
    pub root_cluster: f64,
    pub full: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clients: Vec<ClientMetrics>,
    pub mean_acc: f64,
    pub worst_decile_acc: f64,
    pub stage_mean_acc: StageAccuracy,
    pub groups: Vec<GroupMean>,
    pub orthogonality: OrthogonalityReport,
    pub k_star: usize,
    pub clusters_formed: usize,
    /// Against the generator groups, when known.
    pub clustering: Option<ClusteringQuality>,
    pub executed_rounds: usize,
}

pub fn evaluate(
    model: &HeadModel,
    fed: &TrainedFederation,
    data: &FederationData,
) -> Result<MetricsReport> {
    let n = data.clients.len();
    if fed.leaves.len() != n {
        return Err(Error::config("trained federation does not match the data"));
    }
    let mut clients = Vec::with_capacity(n);
    for (i, c) in data.clients.iter().enumerate() {
        let full = fed.path(i)?;
        clients.push(ClientMetrics {
            client_id: c.id,
            cluster: full.cluster_index,
            acc: accuracy(model, &full, &c.test)?,
            acc_root: accuracy(model, &full.root_snapshot(), &c.test)?,
            acc_root_cluster: accuracy(model, &full.without_leaf(), &c.test)?,
            gains: tier_gains(model, fed, data, i)?,
        });
    }
    let accs: Vec<f64> = clients.iter().map(|c| c.acc).collect();
    let pick = |f: fn(&ClientMetrics) -> f64| mean(&clients.iter().map(f).collect::<Vec<_>>());
    let assignment = &fed.server.assignment;
    let groups = (0..assignment.cluster_count())
        .map(|j| {
            let members: Vec<f64> = clients.iter().filter(|c| c.cluster == j).map(|c| c.acc).collect();
            GroupMean {
                cluster: j,
                clients: members.len(),
                mean_acc: mean(&members),
            }
        })
        .collect();
    let clustering = match data.true_groups() {
        Some(truth) => Some(clustering_quality(&assignment.labels, &truth)?),
        None => None,
    };
    Ok(MetricsReport {
        mean_acc: mean(&accs),
        worst_decile_acc: worst_decile(&accs)?,
        stage_mean_acc: StageAccuracy {
            root: pick(|c| c.acc_root),
            root_cluster: pick(|c| c.acc_root_cluster),
            full: pick(|c| c.acc),
        },
        groups,
        orthogonality: orthogonality_report(fed)?,
        k_star: assignment.k_star,
        clusters_formed: assignment.cluster_count(),
        clustering,
        executed_rounds: fed.executed_rounds(),
        clients,
    })
}

/// Writes `client_id,cluster,acc,G_c,G_l`.
pub fn write_metrics_csv(report: &MetricsReport, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["client_id", "cluster", "acc", "G_c", "G_l"])?;
    for c in &report.clients {
        out.write_record([
            c.client_id.to_string(),
            c.cluster.to_string(),
            c.acc.to_string(),
            c.gains.g_c.to_string(),
            c.gains.g_l.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
