//! Synthetic labeled pools, non-IID client partitions and unseen-client
//! splits.
//!
//! Four partition schemes are supported:
//!
//! - `GlDir`: each client draws a label prior from `Dirichlet(α·1_C)`;
//! - `ScDir`: the Dirichlet prior is over superclasses, with labels uniform
//!   inside the drawn superclass;
//! - `Patho`: each client owns a fixed number of labels, handed out
//!   round-robin over a random class order;
//! - `ClusterShift`: clients form `k_true` groups; a group shares a label
//!   subset and a feature-space rotation. This is the only scheme with a
//!   ground-truth grouping.
//!
//! Each client's samples are split 80/20 into train and test.

use std::io::Read;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::numerics::Matrix;
use crate::rng::{self, StreamRng};

/// Minimum number of samples any client must receive.
pub const MIN_CLIENT_SAMPLES: usize = 10;
const MAX_RETRIES: usize = 100;

// Stream tags, see `crate::rng`.
const TAG_PRIORS: u64 = 1;
const TAG_SAMPLES: u64 = 2;
const TAG_SPLIT: u64 = 3;
const TAG_STRUCTURE: u64 = 4;
const TAG_UNSEEN: u64 = 5;

/// Gaussian class blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPool {
    pub samples: Vec<Sample>,
    pub class_count: usize,
    pub feature_dim: usize,
    pub class_means: Vec<Vec<f64>>,
}

impl LabeledPool {
    /// Pool indices grouped by label, in pool order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }
}

/// Class `c` is centered at a random unit direction times `separation`,
/// with identity covariance.
pub fn gen_pool(
    classes: usize,
    feature_dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledPool> {
    if classes == 0 || feature_dim == 0 || per_class == 0 {
        return Err(Error::config("gen_pool: classes, feature_dim and per_class must be positive"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::config("gen_pool: separation must be a nonnegative real"));
    }
    let mut rng = rng::stream(seed, &[]);
    let class_means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let dir = random_unit(feature_dim, &mut rng);
            dir.into_iter().map(|v| v * separation).collect()
        })
        .collect();
    let mut samples = Vec::with_capacity(classes * per_class);
    for (c, mean) in class_means.iter().enumerate() {
        for _ in 0..per_class {
            let x = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z
                })
                .collect();
            samples.push(Sample::new(x, c));
        }
    }
    Ok(LabeledPool {
        samples,
        class_count: classes,
        feature_dim,
        class_means,
    })
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// How the pool is spread over clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionSpec {
    GlDir {
        alpha: f64,
    },
    ScDir {
        alpha: f64,
        /// Class → superclass map. Defaults to ten equal-size superclasses.
        #[serde(default)]
        superclass_of: Option<Vec<usize>>,
    },
    Patho {
        classes_per_client: usize,
    },
    ClusterShift {
        k_true: usize,
        rotation_angle: f64,
        label_subset_size: usize,
    },
}

/// One client's local data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    /// Stable identifier, kept across the unseen split.
    pub id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Generator group (ClusterShift only).
    pub true_group: Option<usize>,
    /// Pool indices of `train` followed by `test` (empty for CSV input).
    #[serde(default)]
    pub pool_indices: Vec<usize>,
}

impl ClientData {
    /// `n_i`, the training-set size used for aggregation weights.
    pub fn size(&self) -> usize {
        self.train.len()
    }

    /// Sorted distinct labels over train and test.
    pub fn label_support(&self) -> Vec<usize> {
        let mut labels: Vec<usize> =
            self.train.iter().chain(&self.test).map(|s| s.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

/// Participating and held-out clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationData {
    pub clients: Vec<ClientData>,
    pub unseen: Vec<ClientData>,
    pub class_count: usize,
    pub feature_dim: usize,
}

impl FederationData {
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(ClientData::size).collect()
    }

    /// Ground-truth group of every participating client, if known.
    pub fn true_groups(&self) -> Option<Vec<usize>> {
        self.clients.iter().map(|c| c.true_group).collect()
    }

    pub fn distributed_samples(&self) -> usize {
        self.clients
            .iter()
            .chain(&self.unseen)
            .map(|c| c.train.len() + c.test.len())
            .sum()
    }
}

/// Dirichlet draw via normalized Gamma variates.
pub fn sample_dirichlet(alpha: f64, dim: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::config(format!("invalid Dirichlet concentration {alpha}: {e}")))?;
    for _ in 0..MAX_RETRIES {
        let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
    Err(Error::Generation(format!(
        "Dirichlet(α={alpha}) draws underflowed repeatedly"
    )))
}

/// Index drawn from unnormalized `weights`, restricted to entries where
/// `allowed` holds. `None` when no allowed entry has positive weight.
fn draw_categorical(
    weights: &[f64],
    allowed: impl Fn(usize) -> bool,
    rng: &mut impl Rng,
) -> Option<usize> {
    let total: f64 = (0..weights.len()).filter(|&i| allowed(i)).map(|i| weights[i]).sum();
    if total <= 0.0 {
        return None;
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if !allowed(i) || w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(i);
        if u < acc {
            return Some(i);
        }
    }
    last
}

/// Spreads `pool` over `n_clients` according to `spec`.
pub fn partition(
    pool: &LabeledPool,
    spec: &PartitionSpec,
    n_clients: usize,
    seed: u64,
) -> Result<FederationData> {
    if n_clients == 0 {
        return Err(Error::config("partition: need at least one client"));
    }
    let classes = pool.class_count;
    let (assigned, groups, rotations) = match spec {
        PartitionSpec::GlDir { alpha } => {
            check_alpha(*alpha)?;
            let uniform: Vec<usize> = (0..classes).collect();
            (dirichlet_partition(pool, *alpha, classes, &uniform, n_clients, seed)?, None, None)
        }
        PartitionSpec::ScDir {
            alpha,
            superclass_of,
        } => {
            check_alpha(*alpha)?;
            let map = match superclass_of {
                Some(m) => {
                    if m.len() != classes {
                        return Err(Error::config(format!(
                            "superclass_of has {} entries for {classes} classes",
                            m.len()
                        )));
                    }
                    m.clone()
                }
                None => default_superclasses(classes, 10),
            };
            let supers = map.iter().max().map_or(0, |m| m + 1);
            (dirichlet_partition(pool, *alpha, supers, &map, n_clients, seed)?, None, None)
        }
        PartitionSpec::Patho { classes_per_client } => {
            (patho_partition(pool, *classes_per_client, n_clients, seed)?, None, None)
        }
        PartitionSpec::ClusterShift {
            k_true,
            rotation_angle,
            label_subset_size,
        } => {
            let (assigned, groups, rotations) = cluster_shift_partition(
                pool,
                *k_true,
                *rotation_angle,
                *label_subset_size,
                n_clients,
                seed,
            )?;
            (assigned, Some(groups), Some(rotations))
        }
    };

    let mut clients = Vec::with_capacity(n_clients);
    for (i, mut indices) in assigned.into_iter().enumerate() {
        if indices.len() < MIN_CLIENT_SAMPLES {
            return Err(Error::Generation(format!(
                "client {i} received {} samples (< {MIN_CLIENT_SAMPLES})",
                indices.len()
            )));
        }
        let mut split_rng = rng::stream(seed, &[TAG_SPLIT, i as u64]);
        indices.shuffle(&mut split_rng);
        let n_test = (indices.len() / 5).max(1);
        let n_train = indices.len() - n_test;
        let group = groups.as_ref().map(|g| g[i]);
        let rotation = rotations.as_ref().zip(group).map(|(r, g)| &r[g]);
        let make = |idx: &usize| {
            let s = &pool.samples[*idx];
            match rotation {
                Some(r) => Sample::new(r.mul_vec(&s.x).expect("rotation dims"), s.label),
                None => s.clone(),
            }
        };
        clients.push(ClientData {
            id: i,
            train: indices[..n_train].iter().map(make).collect(),
            test: indices[n_train..].iter().map(make).collect(),
            true_group: group,
            pool_indices: indices,
        });
    }
    Ok(FederationData {
        clients,
        unseen: Vec::new(),
        class_count: classes,
        feature_dim: pool.feature_dim,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("Dirichlet alpha must be positive, got {alpha}")))
    }
}

/// `superclasses` contiguous groups of (near-)equal size.
pub fn default_superclasses(classes: usize, superclasses: usize) -> Vec<usize> {
    let s = superclasses.clamp(1, classes);
    (0..classes).map(|c| c * s / classes).collect()
}

/// Dirichlet prior over `groups` label groups per client, labels drawn
/// uniformly inside the chosen group, samples taken without replacement.
///
/// Stream layout: client `i`'s prior and categorical draws come from the
/// `(TAG_PRIORS, i)` stream: first `groups` Gamma variates for the prior,
/// then per sample one group draw and, when a group holds more than one
/// class, one uniform class draw.
fn dirichlet_partition(
    pool: &LabeledPool,
    alpha: f64,
    groups: usize,
    group_of: &[usize],
    n_clients: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let quota = pool.samples.len() / n_clients;
    if quota < MIN_CLIENT_SAMPLES {
        return Err(Error::Generation(format!(
            "pool of {} samples cannot give {n_clients} clients {MIN_CLIENT_SAMPLES} samples each",
            pool.samples.len()
        )));
    }
    let mut by_class = pool.indices_by_class();
    let mut sample_rng = rng::stream(seed, &[TAG_SAMPLES]);
    for list in &mut by_class {
        list.shuffle(&mut sample_rng);
    }
    let members: Vec<Vec<usize>> = (0..groups)
        .map(|g| (0..pool.class_count).filter(|&c| group_of[c] == g).collect())
        .collect();

    let mut out = Vec::with_capacity(n_clients);
    for i in 0..n_clients {
        let mut rng = rng::stream(seed, &[TAG_PRIORS, i as u64]);
        let mut prior = sample_dirichlet(alpha, groups, &mut rng)?;
        let mut taken = Vec::with_capacity(quota);
        let mut retries = 0;
        while taken.len() < quota {
            let group_available =
                |g: usize| members[g].iter().any(|&c| !by_class[c].is_empty());
            let Some(g) = draw_categorical(&prior, group_available, &mut rng) else {
                retries += 1;
                if retries > MAX_RETRIES {
                    return Err(Error::Generation(format!(
                        "client {i}: label prior exhausted after {MAX_RETRIES} resamples"
                    )));
                }
                prior = sample_dirichlet(alpha, groups, &mut rng)?;
                continue;
            };
            let open: Vec<usize> =
                members[g].iter().copied().filter(|&c| !by_class[c].is_empty()).collect();
            let c = if open.len() == 1 {
                open[0]
            } else {
                open[rng.random_range(0..open.len())]
            };
            taken.push(by_class[c].pop().expect("class has samples"));
        }
        out.push(taken);
    }
    Ok(out)
}

fn patho_partition(
    pool: &LabeledPool,
    per_client: usize,
    n_clients: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let classes = pool.class_count;
    if per_client == 0 || per_client > classes {
        return Err(Error::config(format!(
            "classes_per_client must be in 1..={classes}, got {per_client}"
        )));
    }
    let mut structure = rng::stream(seed, &[TAG_STRUCTURE]);
    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(&mut structure);
    let owned: Vec<Vec<usize>> = (0..n_clients)
        .map(|i| {
            (0..per_client)
                .map(|t| class_order[(i * per_client + t) % classes])
                .collect()
        })
        .collect();
    deal_owned_classes(pool, &owned, seed)
}

/// Splits each class's samples evenly among the clients that own it,
/// round-robin after a seeded shuffle.
fn deal_owned_classes(
    pool: &LabeledPool,
    owned: &[Vec<usize>],
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut by_class = pool.indices_by_class();
    let mut sample_rng = rng::stream(seed, &[TAG_SAMPLES]);
    let mut out = vec![Vec::new(); owned.len()];
    for (c, list) in by_class.iter_mut().enumerate() {
        let owners: Vec<usize> = (0..owned.len()).filter(|&i| owned[i].contains(&c)).collect();
        if owners.is_empty() {
            continue;
        }
        if list.len() < owners.len() {
            return Err(Error::Generation(format!(
                "class {c} has {} samples for {} owning clients",
                list.len(),
                owners.len()
            )));
        }
        list.shuffle(&mut sample_rng);
        for (k, &idx) in list.iter().enumerate() {
            out[owners[k % owners.len()]].push(idx);
        }
    }
    Ok(out)
}

type ShiftParts = (Vec<Vec<usize>>, Vec<usize>, Vec<Matrix>);

fn cluster_shift_partition(
    pool: &LabeledPool,
    k_true: usize,
    angle: f64,
    subset: usize,
    n_clients: usize,
    seed: u64,
) -> Result<ShiftParts> {
    let classes = pool.class_count;
    if k_true == 0 || k_true > n_clients {
        return Err(Error::config(format!(
            "k_true must be in 1..={n_clients}, got {k_true}"
        )));
    }
    if subset == 0 || subset > classes {
        return Err(Error::config(format!(
            "label_subset_size must be in 1..={classes}, got {subset}"
        )));
    }
    if pool.feature_dim < 2 {
        return Err(Error::config("ClusterShift needs at least two feature dimensions"));
    }
    if !angle.is_finite() {
        return Err(Error::config("rotation_angle must be finite"));
    }
    let mut structure = rng::stream(seed, &[TAG_STRUCTURE]);
    let mut client_order: Vec<usize> = (0..n_clients).collect();
    client_order.shuffle(&mut structure);
    let mut group_of = vec![0; n_clients];
    for (k, &i) in client_order.iter().enumerate() {
        group_of[i] = k % k_true;
    }
    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(&mut structure);
    let subsets: Vec<Vec<usize>> = (0..k_true)
        .map(|g| (0..subset).map(|t| class_order[(g * subset + t) % classes]).collect())
        .collect();
    let rotations: Vec<Matrix> = (0..k_true)
        .map(|_| plane_rotation(pool.feature_dim, angle, &mut structure))
        .collect();
    let owned: Vec<Vec<usize>> = group_of.iter().map(|&g| subsets[g].clone()).collect();
    let assigned = deal_owned_classes(pool, &owned, seed)?;
    Ok((assigned, group_of, rotations))
}

/// Rotation by `angle` in a random 2-plane, identity on its complement.
fn plane_rotation(dim: usize, angle: f64, rng: &mut StreamRng) -> Matrix {
    let u = random_unit(dim, rng);
    let v = loop {
        let w = random_unit(dim, rng);
        let proj: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
        let r: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a - proj * b).collect();
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            break r.into_iter().map(|x| x / norm).collect::<Vec<f64>>();
        }
    };
    let (c, s) = (angle.cos(), angle.sin());
    Matrix::from_fn(dim, dim, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id + (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j])
    })
}

/// Moves `⌈fraction·N⌉` clients to the unseen set.
///
/// When ground-truth groups are present, the draw is repeated (with a
/// warning) until every group keeps at least one participating client.
pub fn split_unseen(data: &FederationData, fraction: f64, seed: u64) -> Result<FederationData> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "unseen fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = data.clients.len();
    let n_unseen = ((fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
    let groups = data.true_groups();
    for attempt in 0..MAX_RETRIES as u64 {
        let mut rng = rng::stream(seed, &[TAG_UNSEEN, attempt]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut unseen_idx: Vec<usize> = order[..n_unseen].to_vec();
        unseen_idx.sort_unstable();
        let keep: Vec<usize> = (0..n).filter(|i| !unseen_idx.contains(i)).collect();
        if let Some(g) = &groups {
            let all: std::collections::BTreeSet<usize> = g.iter().copied().collect();
            let kept: std::collections::BTreeSet<usize> = keep.iter().map(|&i| g[i]).collect();
            if all != kept {
                log::warn!("unseen split attempt {attempt} emptied a true group; resampling");
                continue;
            }
        }
        return Ok(FederationData {
            clients: keep.iter().map(|&i| data.clients[i].clone()).collect(),
            unseen: data
                .unseen
                .iter()
                .cloned()
                .chain(unseen_idx.iter().map(|&i| data.clients[i].clone()))
                .collect(),
            class_count: data.class_count,
            feature_dim: data.feature_dim,
        });
    }
    Err(Error::Generation(
        "could not find an unseen split preserving every true group".into(),
    ))
}

/// Reads `client_id,label,f0..f{d-1}` rows (header required, labels
/// 0-based). Client ids are renumbered densely in ascending order; each
/// client's rows are split 80/20 in file order after a seeded shuffle.
pub fn load_csv(reader: impl Read, class_count: Option<usize>, seed: u64) -> Result<FederationData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "client_id" || &headers[1] != "label" {
        return Err(Error::Format(
            "CSV header must start with client_id,label followed by feature columns".into(),
        ));
    }
    let d = headers.len() - 2;
    for (k, name) in headers.iter().skip(2).enumerate() {
        if name != format!("f{k}") {
            return Err(Error::Format(format!("expected feature column f{k}, found {name}")));
        }
    }
    let mut rows: std::collections::BTreeMap<u64, Vec<Sample>> = Default::default();
    let mut max_label = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_err = |what: &str| Error::Format(format!("row {}: bad {what}", line + 2));
        let client: u64 = rec[0].trim().parse().map_err(|_| parse_err("client_id"))?;
        let label: usize = rec[1].trim().parse().map_err(|_| parse_err("label"))?;
        let x = (2..2 + d)
            .map(|k| rec[k].trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| parse_err("feature"))?;
        max_label = max_label.max(label);
        rows.entry(client).or_default().push(Sample::new(x, label));
    }
    let classes = class_count.unwrap_or(max_label + 1);
    if max_label >= classes {
        return Err(Error::Format(format!(
            "label {max_label} out of range for {classes} classes"
        )));
    }
    let mut clients = Vec::with_capacity(rows.len());
    for (i, (_, mut samples)) in rows.into_iter().enumerate() {
        if samples.len() < 2 {
            return Err(Error::Format(format!(
                "client {i} needs at least two rows for a train/test split"
            )));
        }
        samples.shuffle(&mut rng::stream(seed, &[TAG_SPLIT, i as u64]));
        let n_test = (samples.len() / 5).max(1);
        let test = samples.split_off(samples.len() - n_test);
        clients.push(ClientData {
            id: i,
            train: samples,
            test,
            true_group: None,
            pool_indices: Vec::new(),
        });
    }
    if clients.is_empty() {
        return Err(Error::Format("CSV contains no rows".into()));
    }
    Ok(FederationData {
        clients,
        unseen: Vec::new(),
        class_count: classes,
        feature_dim: d,
    })
}
