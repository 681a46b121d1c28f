//! The three-stage training protocol.
//!
//! 1. **Root.** Every client trains the shared root adapter locally; the
//!    server averages the products `B_i·A_i` with data-proportional weights
//!    and refactors the result to rank `r` by truncated SVD. Each client's
//!    local `B` also feeds its EMA basis tracker.
//! 2. **Clustering** runs once on the tracked bases.
//! 3. **Cluster.** Each cluster trains its own adapter the same way, on top
//!    of the frozen root and penalized toward orthogonality with it.
//! 4. **Leaf.** Each client trains a private adapter on top of root and
//!    cluster, penalized against both. Leaves are never aggregated.
//!
//! Server stages stop when the relative step
//! `ρ = ‖ΔW_new − ΔW_prev‖_F / (‖ΔW_prev‖_F + ε)` drops to `τ_rel`, or when
//! their round budget is spent. Leaf rounds are local epochs with the same
//! rule applied to each client's own leaf delta.
//!
//! Client work inside a round runs on a rayon pool; results are collected
//! and reduced in ascending client order, and every client draws from its
//! own seeded stream, so the outcome does not depend on the worker count.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_clients, BasisTracker, ClusterAssignment};
use crate::datagen::{ClientData, FederationData};
use crate::error::{Error, Result};
use crate::lora::{AdapterPath, LoraAdapter, TierId};
use crate::model::{dataset_loss, local_update, Anchor, BatchMode, HeadModel, OptimizerConfig};
use crate::numerics::{frobenius_norm, truncated_svd, Matrix};
use crate::rng;

const TAG_INIT: u64 = 10;
const TAG_LOCAL: u64 = 11;
const TAG_MODEL: u64 = 12;

/// How the server combines client factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Average `B_i·A_i`, then refactor by truncated SVD.
    ProductSvd,
    /// Average `B` and `A` separately (cross terms included).
    SeparateAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rank: usize,
    pub gamma_c: f64,
    pub gamma_l: f64,
    /// EMA decay of the basis trackers.
    pub lambda: f64,
    pub tau_rel: f64,
    pub eps: f64,
    pub t_root: usize,
    pub t_cluster: usize,
    pub t_leaf: usize,
    /// Must equal `t_root + t_cluster + t_leaf`.
    pub total_rounds: usize,
    pub lr: f64,
    pub local_epochs: usize,
    pub batch: BatchMode,
    pub k_min: usize,
    /// Defaults to `min(10, N − 1)`.
    pub k_max: Option<usize>,
    pub aggregation_mode: AggregationMode,
    pub master_seed: u64,
    /// Standard deviation multiplier for the stage-start `A` factors.
    pub init_scale: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            gamma_c: 1.0,
            gamma_l: 1.0,
            lambda: 0.9,
            tau_rel: 1e-3,
            eps: 1e-8,
            t_root: 20,
            t_cluster: 20,
            t_leaf: 10,
            total_rounds: 50,
            lr: 0.05,
            local_epochs: 1,
            batch: BatchMode::MiniBatch { size: 32 },
            k_min: 2,
            k_max: None,
            aggregation_mode: AggregationMode::ProductSvd,
            master_seed: 0,
            init_scale: 0.01,
        }
    }
}

fn field_error(field: &str, msg: impl fmt::Display) -> Error {
    Error::Config(format!("field `{field}`: {msg}"))
}

impl FederationConfig {
    /// Checks every field; the error names the first offending one.
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(field_error("rank", "must be positive"));
        }
        for (name, v) in [("gamma_c", self.gamma_c), ("gamma_l", self.gamma_l)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(field_error(name, format!("must be a nonnegative real, got {v}")));
            }
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(field_error("lambda", format!("must be in (0, 1), got {}", self.lambda)));
        }
        for (name, v) in [("tau_rel", self.tau_rel), ("eps", self.eps), ("lr", self.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field_error(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(field_error("init_scale", "must be positive"));
        }
        let sum = self.t_root + self.t_cluster + self.t_leaf;
        if sum != self.total_rounds {
            return Err(field_error(
                "total_rounds",
                format!(
                    "budget rule violated: t_root + t_cluster + t_leaf = {sum} but total_rounds = {}",
                    self.total_rounds
                ),
            ));
        }
        if self.local_epochs == 0 {
            return Err(field_error("local_epochs", "must be positive"));
        }
        if let BatchMode::MiniBatch { size: 0 } = self.batch {
            return Err(field_error("batch", "mini-batch size must be positive"));
        }
        if self.k_min < 2 {
            return Err(field_error("k_min", "must be at least 2"));
        }
        if let Some(k_max) = self.k_max {
            if k_max < self.k_min {
                return Err(field_error("k_max", "must be at least k_min"));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            epochs: self.local_epochs,
            batch: self.batch,
        }
    }
}

/// The frozen model every client shares, drawn from the master seed.
pub fn base_model(
    input_dim: usize,
    hidden: usize,
    classes: usize,
    base_scale: f64,
    seed: u64,
) -> Result<HeadModel> {
    HeadModel::random(input_dim, hidden, classes, base_scale, &mut rng::stream(seed, &[TAG_MODEL]))
}

/// Runs client work on a fixed-size pool and returns results in input order.
pub struct Executor {
    pool: rayon::ThreadPool,
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(field_error("workers", "must be positive"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Applies `f` to every item; the first error in input order wins.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync,
    {
        self.pool
            .install(|| items.par_iter().map(&f).collect::<Vec<_>>())
            .into_iter()
            .collect()
    }
}

fn normalize_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::precondition("aggregation weights need at least one client"));
    }
    if sizes.contains(&0) {
        return Err(Error::precondition("every client must hold at least one sample"));
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// `π_i = n_i / Σ n_u`.
pub fn weights_root(sizes: &[usize]) -> Result<Vec<f64>> {
    normalize_weights(sizes)
}

/// Root weights restricted to `members` (indices into `sizes`).
pub fn weights_cluster(members: &[usize], sizes: &[usize]) -> Result<Vec<f64>> {
    let sub = members
        .iter()
        .map(|&i| {
            sizes
                .get(i)
                .copied()
                .ok_or_else(|| Error::config(format!("cluster member {i} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    normalize_weights(&sub)
}

fn check_aggregation(locals: &[LoraAdapter], weights: &[f64]) -> Result<()> {
    if locals.is_empty() || locals.len() != weights.len() {
        return Err(Error::config(format!(
            "{} adapters with {} weights",
            locals.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::precondition(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// `Σ π_i B_i A_i`.
pub fn aggregate_product(locals: &[LoraAdapter], weights: &[f64]) -> Result<Matrix> {
    check_aggregation(locals, weights)?;
    let mut out = Matrix::zeros(locals[0].p(), locals[0].q());
    for (ad, &w) in locals.iter().zip(weights) {
        out.add_scaled(w, &ad.delta())?;
    }
    Ok(out)
}

/// `(B, A) = (U_r, Σ_r V_rᵀ)` from the truncated SVD of `delta`.
pub fn refactor(delta: &Matrix, r: usize) -> Result<LoraAdapter> {
    let svd = truncated_svd(delta, r)?;
    let a = Matrix::from_fn(r, delta.cols(), |i, j| svd.singular_values[i] * svd.vt[(i, j)]);
    LoraAdapter::new(svd.u, a)
}

/// `(Σ π_i B_i, Σ π_i A_i)`.
pub fn aggregate_separate(locals: &[LoraAdapter], weights: &[f64]) -> Result<LoraAdapter> {
    check_aggregation(locals, weights)?;
    let mut b = Matrix::zeros(locals[0].p(), locals[0].rank());
    let mut a = Matrix::zeros(locals[0].rank(), locals[0].q());
    for (ad, &w) in locals.iter().zip(weights) {
        b.add_scaled(w, ad.b())?;
        a.add_scaled(w, ad.a())?;
    }
    LoraAdapter::new(b, a)
}

/// Relative step size and whether it is at or below `tau_rel`.
pub fn stop_check(delta_prev: &Matrix, delta_new: &Matrix, tau_rel: f64, eps: f64) -> Result<(bool, f64)> {
    let diff = delta_new.sub(delta_prev)?;
    let rho = frobenius_norm(&diff) / (frobenius_norm(delta_prev) + eps);
    Ok((rho <= tau_rel, rho))
}

/// Server step: the next broadcast adapter and the aggregate `ΔW` used for
/// the stopping rule.
fn server_aggregate(
    mode: AggregationMode,
    locals: &[LoraAdapter],
    weights: &[f64],
    r: usize,
) -> Result<(LoraAdapter, Matrix)> {
    match mode {
        AggregationMode::ProductSvd => {
            let delta = aggregate_product(locals, weights)?;
            Ok((refactor(&delta, r)?, delta))
        }
        AggregationMode::SeparateAverage => {
            let adapter = aggregate_separate(locals, weights)?;
            let delta = adapter.delta();
            Ok((adapter, delta))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Root,
    Cluster,
    Leaf,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Root => "root",
            Stage::Cluster => "cluster",
            Stage::Leaf => "leaf",
        })
    }
}

impl Stage {
    fn code(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Criterion,
    Budget,
}

/// Per-round trace of one server stage (or of the leaf stage as a whole).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub rhos: Vec<f64>,
    pub weighted_train_losses: Vec<f64>,
    pub rounds: usize,
    pub stop: StopReason,
}

impl StageReport {
    fn empty() -> Self {
        Self {
            rhos: Vec::new(),
            weighted_train_losses: Vec::new(),
            rounds: 0,
            stop: StopReason::Budget,
        }
    }
}

/// One line of the round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLogRow {
    pub stage: Stage,
    pub round: usize,
    pub cluster: Option<usize>,
    pub rho: f64,
    pub weighted_train_loss: f64,
    pub stopped: bool,
}

/// Writes `stage,round,cluster,rho,weighted_train_loss,stopped`.
pub fn write_round_log(rows: &[RoundLogRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["stage", "round", "cluster", "rho", "weighted_train_loss", "stopped"])?;
    for row in rows {
        out.write_record([
            row.stage.to_string(),
            row.round.to_string(),
            row.cluster.map(|c| c.to_string()).unwrap_or_default(),
            row.rho.to_string(),
            row.weighted_train_loss.to_string(),
            row.stopped.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Frozen server-side tiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub root: LoraAdapter,
    /// Indexed by cluster.
    pub clusters: Vec<LoraAdapter>,
    pub assignment: ClusterAssignment,
}

impl ServerState {
    /// Root + cluster path for client `client` in cluster `j`, zero leaf.
    pub fn cluster_path(&self, j: usize, client: usize) -> Result<AdapterPath> {
        let cluster = self
            .clusters
            .get(j)
            .ok_or_else(|| Error::config(format!("cluster {j} does not exist")))?;
        let zero = LoraAdapter::zeros(self.root.p(), self.root.q(), self.root.rank())?;
        AdapterPath::new(self.root.clone(), cluster.clone(), zero, j, client)
    }
}

/// Everything the protocol produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedFederation {
    pub config: FederationConfig,
    pub server: ServerState,
    /// Indexed like `FederationData::clients`.
    pub leaves: Vec<LoraAdapter>,
    pub root_report: StageReport,
    pub cluster_reports: Vec<StageReport>,
    pub leaf_report: StageReport,
    /// Leaf epochs run by each client.
    pub leaf_rounds: Vec<usize>,
    pub round_log: Vec<RoundLogRow>,
}

impl TrainedFederation {
    /// Client `i`'s full root → cluster → leaf path.
    pub fn path(&self, i: usize) -> Result<AdapterPath> {
        let j = *self
            .server
            .assignment
            .labels
            .get(i)
            .ok_or_else(|| Error::config(format!("client {i} does not exist")))?;
        let mut p = self.server.cluster_path(j, i)?;
        p.leaf = self.leaves[i].clone();
        Ok(p)
    }

    /// Rounds across stages; cluster rounds count once per round index.
    pub fn executed_rounds(&self) -> usize {
        self.root_report.rounds
            + self.cluster_reports.iter().map(|r| r.rounds).max().unwrap_or(0)
            + self.leaf_report.rounds
    }
}

fn local_rng(cfg: &FederationConfig, stage: Stage, round: usize, client: &ClientData) -> rng::StreamRng {
    rng::stream(cfg.master_seed, &[TAG_LOCAL, stage.code(), round as u64, client.id as u64])
}

fn init_adapter(cfg: &FederationConfig, model: &HeadModel, stage: Stage, index: u64) -> Result<LoraAdapter> {
    LoraAdapter::init(
        model.classes(),
        model.hidden(),
        cfg.rank,
        cfg.init_scale,
        &mut rng::stream(cfg.master_seed, &[TAG_INIT, stage.code(), index]),
    )
}

fn weighted_loss(
    exec: &Executor,
    model: &HeadModel,
    clients: &[(&ClientData, AdapterPath)],
    weights: &[f64],
) -> Result<f64> {
    let losses = exec.map(clients, |(c, path)| dataset_loss(model, path, &c.train))?;
    Ok(losses.iter().zip(weights).map(|(l, w)| l * w).sum())
}

/// Output of the root stage.
#[derive(Clone, Debug)]
pub struct RootOutcome {
    pub root: LoraAdapter,
    pub report: StageReport,
    pub tracker: BasisTracker,
    pub log: Vec<RoundLogRow>,
}

pub fn run_root_stage(
    cfg: &FederationConfig,
    model: &HeadModel,
    data: &FederationData,
    exec: &Executor,
) -> Result<RootOutcome> {
    let n = data.clients.len();
    let weights = weights_root(&data.sizes())?;
    let opt = cfg.optimizer();
    let mut tracker = BasisTracker::new(n, cfg.lambda)?;
    let mut server = init_adapter(cfg, model, Stage::Root, 0)?;
    let mut prev = server.delta();
    let mut report = StageReport::empty();
    let mut log = Vec::new();
    let clients: Vec<(usize, &ClientData)> = data.clients.iter().enumerate().collect();
    for round in 1..=cfg.t_root {
        let locals = exec.map(&clients, |&(i, c)| {
            let path = AdapterPath::root_only(server.clone(), i);
            let mut rng = local_rng(cfg, Stage::Root, round, c);
            local_update(model, &path, &c.train, TierId::Root, &[], &opt, &mut rng)
        })?;
        for (i, local) in locals.iter().enumerate() {
            tracker.ema_update(i, local.b())?;
        }
        let (next, delta) = server_aggregate(cfg.aggregation_mode, &locals, &weights, cfg.rank)?;
        let (stop, rho) = stop_check(&prev, &delta, cfg.tau_rel, cfg.eps)?;
        server = next;
        prev = delta;
        let paths: Vec<(&ClientData, AdapterPath)> = clients
            .iter()
            .map(|&(i, c)| (c, AdapterPath::root_only(server.clone(), i)))
            .collect();
        let loss = weighted_loss(exec, model, &paths, &weights)?;
        report.rhos.push(rho);
        report.weighted_train_losses.push(loss);
        report.rounds = round;
        log.push(RoundLogRow {
            stage: Stage::Root,
            round,
            cluster: None,
            rho,
            weighted_train_loss: loss,
            stopped: stop,
        });
        log::debug!("root round {round}: rho = {rho:.3e}, loss = {loss:.5}");
        if stop {
            report.stop = StopReason::Criterion;
            break;
        }
    }
    Ok(RootOutcome {
        root: server,
        report,
        tracker,
        log,
    })
}

/// Output of the cluster stage, indexed by cluster.
#[derive(Clone, Debug)]
pub struct ClusterOutcome {
    pub clusters: Vec<LoraAdapter>,
    pub reports: Vec<StageReport>,
    pub log: Vec<RoundLogRow>,
}

pub fn run_cluster_stage(
    cfg: &FederationConfig,
    model: &HeadModel,
    data: &FederationData,
    assignment: &ClusterAssignment,
    root: &LoraAdapter,
    exec: &Executor,
) -> Result<ClusterOutcome> {
    if assignment.labels.len() != data.clients.len() {
        return Err(Error::config("assignment does not cover every client"));
    }
    let k = assignment.cluster_count();
    let sizes = data.sizes();
    let members: Vec<Vec<usize>> = (0..k).map(|j| assignment.members(j)).collect();
    let weights = members
        .iter()
        .map(|m| weights_cluster(m, &sizes))
        .collect::<Result<Vec<_>>>()?;
    let mut reports = vec![StageReport::empty(); k];
    let mut log = Vec::new();
    if cfg.t_cluster == 0 {
        let zero = LoraAdapter::zeros(model.classes(), model.hidden(), cfg.rank)?;
        return Ok(ClusterOutcome {
            clusters: vec![zero; k],
            reports,
            log,
        });
    }
    let mut servers = (0..k)
        .map(|j| init_adapter(cfg, model, Stage::Cluster, j as u64))
        .collect::<Result<Vec<_>>>()?;
    let mut prev: Vec<Matrix> = servers.iter().map(LoraAdapter::delta).collect();
    let mut active = vec![true; k];
    let opt = cfg.optimizer();
    let anchor_basis = root.b();
    for round in 1..=cfg.t_cluster {
        let jobs: Vec<(usize, usize)> = (0..k)
            .filter(|&j| active[j])
            .flat_map(|j| members[j].iter().map(move |&i| (j, i)))
            .collect();
        if jobs.is_empty() {
            break;
        }
        let locals = exec.map(&jobs, |&(j, i)| {
            let c = &data.clients[i];
            let zero = LoraAdapter::zeros(model.classes(), model.hidden(), cfg.rank)?;
            let path = AdapterPath::new(root.clone(), servers[j].clone(), zero, j, i)?;
            let anchors = [Anchor::new(anchor_basis, cfg.gamma_c)];
            let mut rng = local_rng(cfg, Stage::Cluster, round, c);
            local_update(model, &path, &c.train, TierId::Cluster(j), &anchors, &opt, &mut rng)
        })?;
        let mut offset = 0;
        for j in 0..k {
            if !active[j] {
                continue;
            }
            let m = members[j].len();
            let group = &locals[offset..offset + m];
            offset += m;
            let (next, delta) = server_aggregate(cfg.aggregation_mode, group, &weights[j], cfg.rank)?;
            let (stop, rho) = stop_check(&prev[j], &delta, cfg.tau_rel, cfg.eps)?;
            servers[j] = next;
            prev[j] = delta;
            let zero = LoraAdapter::zeros(model.classes(), model.hidden(), cfg.rank)?;
            let paths = members[j]
                .iter()
                .map(|&i| {
                    let path = AdapterPath::new(root.clone(), servers[j].clone(), zero.clone(), j, i)?;
                    Ok((&data.clients[i], path))
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = weighted_loss(exec, model, &paths, &weights[j])?;
            let report = &mut reports[j];
            report.rhos.push(rho);
            report.weighted_train_losses.push(loss);
            report.rounds = round;
            log.push(RoundLogRow {
                stage: Stage::Cluster,
                round,
                cluster: Some(j),
                rho,
                weighted_train_loss: loss,
                stopped: stop,
            });
            if stop {
                report.stop = StopReason::Criterion;
                active[j] = false;
            }
        }
    }
    Ok(ClusterOutcome {
        clusters: servers,
        reports,
        log,
    })
}

/// Output of the leaf stage, indexed by client.
#[derive(Clone, Debug)]
pub struct LeafOutcome {
    pub leaves: Vec<LoraAdapter>,
    pub report: StageReport,
    pub client_rounds: Vec<usize>,
    pub log: Vec<RoundLogRow>,
}

struct LeafTrace {
    leaf: LoraAdapter,
    rhos: Vec<f64>,
    losses: Vec<f64>,
    stopped: bool,
}

/// Trains the leaf of `start` (root and cluster frozen) for up to `budget`
/// rounds of local epochs, stopping on the leaf's own relative step.
/// Returns the leaf, its per-round `ρ`, and whether the criterion fired.
pub(crate) fn train_leaf(
    cfg: &FederationConfig,
    model: &HeadModel,
    start: AdapterPath,
    train: &[crate::model::Sample],
    budget: usize,
    mut rng: impl FnMut(usize) -> rng::StreamRng,
    mut after_round: impl FnMut(&AdapterPath) -> Result<()>,
) -> Result<(LoraAdapter, Vec<f64>, bool)> {
    let opt = cfg.optimizer();
    let tier = TierId::Leaf(start.client_index);
    let root_b = start.root.b().clone();
    let cluster_b = start.cluster.b().clone();
    let mut path = start;
    let mut prev = path.leaf.delta();
    let mut rhos = Vec::new();
    let anchors = [
        Anchor::new(&root_b, cfg.gamma_c),
        Anchor::new(&cluster_b, cfg.gamma_l),
    ];
    for round in 1..=budget {
        let leaf = local_update(model, &path, train, tier, &anchors, &opt, &mut rng(round))?;
        let delta = leaf.delta();
        let (stop, rho) = stop_check(&prev, &delta, cfg.tau_rel, cfg.eps)?;
        path.leaf = leaf;
        prev = delta;
        rhos.push(rho);
        after_round(&path)?;
        if stop {
            return Ok((path.leaf, rhos, true));
        }
    }
    Ok((path.leaf, rhos, false))
}

pub fn run_leaf_stage(
    cfg: &FederationConfig,
    model: &HeadModel,
    data: &FederationData,
    server: &ServerState,
    exec: &Executor,
) -> Result<LeafOutcome> {
    let n = data.clients.len();
    let weights = weights_root(&data.sizes())?;
    let zero = LoraAdapter::zeros(model.classes(), model.hidden(), cfg.rank)?;
    if cfg.t_leaf == 0 {
        return Ok(LeafOutcome {
            leaves: vec![zero; n],
            report: StageReport::empty(),
            client_rounds: vec![0; n],
            log: Vec::new(),
        });
    }
    let indices: Vec<usize> = (0..n).collect();
    let traces = exec.map(&indices, |&i| {
        let c = &data.clients[i];
        let j = server.assignment.labels[i];
        let mut start = server.cluster_path(j, i)?;
        start.leaf = init_adapter(cfg, model, Stage::Leaf, c.id as u64)?;
        let mut losses = Vec::new();
        let (leaf, rhos, stopped) = train_leaf(
            cfg,
            model,
            start,
            &c.train,
            cfg.t_leaf,
            |round| local_rng(cfg, Stage::Leaf, round, c),
            |path| {
                losses.push(dataset_loss(model, path, &c.train)?);
                Ok(())
            },
        )?;
        Ok(LeafTrace {
            leaf,
            rhos,
            losses,
            stopped,
        })
    })?;

    let rounds = traces.iter().map(|t| t.rhos.len()).max().unwrap_or(0);
    let mut report = StageReport::empty();
    let mut log = Vec::new();
    for epoch in 1..=rounds {
        let running: Vec<&LeafTrace> = traces.iter().filter(|t| t.rhos.len() >= epoch).collect();
        let rho = running.iter().map(|t| t.rhos[epoch - 1]).fold(0.0, f64::max);
        let loss: f64 = traces
            .iter()
            .zip(&weights)
            .map(|(t, w)| w * t.losses[epoch.min(t.losses.len()) - 1])
            .sum();
        let stopped = traces
            .iter()
            .all(|t| t.rhos.len() < epoch || (t.rhos.len() == epoch && t.stopped));
        report.rhos.push(rho);
        report.weighted_train_losses.push(loss);
        log.push(RoundLogRow {
            stage: Stage::Leaf,
            round: epoch,
            cluster: None,
            rho,
            weighted_train_loss: loss,
            stopped,
        });
    }
    report.rounds = rounds;
    report.stop = if traces.iter().all(|t| t.stopped) {
        StopReason::Criterion
    } else {
        StopReason::Budget
    };
    Ok(LeafOutcome {
        client_rounds: traces.iter().map(|t| t.rhos.len()).collect(),
        leaves: traces.into_iter().map(|t| t.leaf).collect(),
        report,
        log,
    })
}

/// Clustering on the root-stage trackers, with the single-cluster fallback
/// when no root round ran.
pub fn cluster_after_root(
    cfg: &FederationConfig,
    tracker: &BasisTracker,
) -> Result<ClusterAssignment> {
    let n = tracker.len();
    if cfg.t_root == 0 {
        return Ok(ClusterAssignment::single(n, "no root rounds were run"));
    }
    let k_max = cfg.k_max.unwrap_or(10);
    cluster_clients(tracker, cfg.rank, cfg.k_min, k_max)
}

/// Root stage, clustering, cluster stage and leaf stage in order.
pub fn run_protocol(
    cfg: &FederationConfig,
    model: &HeadModel,
    data: &FederationData,
    exec: &Executor,
) -> Result<TrainedFederation> {
    cfg.validate()?;
    if data.clients.is_empty() {
        return Err(Error::config("federation has no participating clients"));
    }
    if cfg.rank > model.classes().min(model.hidden()) {
        return Err(field_error(
            "rank",
            format!(
                "{} exceeds min(classes, hidden) = {}",
                cfg.rank,
                model.classes().min(model.hidden())
            ),
        ));
    }
    let root = run_root_stage(cfg, model, data, exec).map_err(|e| e.in_stage("root"))?;
    let assignment =
        cluster_after_root(cfg, &root.tracker).map_err(|e| e.in_stage("clustering"))?;
    log::info!(
        "root stage: {} rounds; clustering picked k* = {} ({} clusters formed)",
        root.report.rounds,
        assignment.k_star,
        assignment.cluster_count()
    );
    let cluster = run_cluster_stage(cfg, model, data, &assignment, &root.root, exec)
        .map_err(|e| e.in_stage("cluster"))?;
    let server = ServerState {
        root: root.root,
        clusters: cluster.clusters,
        assignment,
    };
    let leaf = run_leaf_stage(cfg, model, data, &server, exec).map_err(|e| e.in_stage("leaf"))?;
    let mut round_log = root.log;
    round_log.extend(cluster.log);
    round_log.extend(leaf.log);
    Ok(TrainedFederation {
        config: cfg.clone(),
        server,
        leaves: leaf.leaves,
        root_report: root.report,
        cluster_reports: cluster.reports,
        leaf_report: leaf.report,
        leaf_rounds: leaf.client_rounds,
        round_log,
    })
}
