//! Subcommand implementations and the on-disk run layout.
//!
//! A run directory holds:
//!
//! - `manifest.json`: engine version, the fully materialized config and the
//!   list of every file the run wrote;
//! - `round_log.csv`: `stage,round,cluster,rho,weighted_train_loss,stopped`;
//! - `metrics.json` and `metrics.csv` (`client_id,cluster,acc,G_c,G_l`);
//! - `clustering.json`: `k_star`, `sigma`, `eigenvalues`, `eigengaps`,
//!   `labels` and `distance_matrix`;
//! - `state.json`: the cluster assignment and stage reports;
//! - `checkpoints/root.hlra`, `checkpoints/cluster_{j:03}.hlra` and
//!   `checkpoints/leaf_{i:03}.hlra`, one per adapter, where `i` is the
//!   position of the client among the participating clients.
//!
//! Checkpoint layout (little-endian): the 4-byte magic `HLRA`, a `u32`
//! format version (1), `p`, `q`, `r` as `u64`, then the `p·r` entries of `B`
//! and the `r·q` entries of `A`, each row-major as IEEE-754 `f64`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use hilora::adaptation::adapt_unseen;
use hilora::clustering::ClusterAssignment;
use hilora::eval::{evaluate, write_metrics_csv, MetricsReport};
use hilora::federation::{
    cluster_after_root, run_protocol, run_root_stage, write_round_log, Executor, RoundLogRow,
    ServerState, StageReport, TrainedFederation,
};
use hilora::lora::{read_adapter, write_adapter, LoraAdapter};
use hilora::model::{gradcheck_suite, GradcheckDims};
use hilora::{rng, Matrix};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

const TAG_GRADCHECK: u64 = 30;

pub const MANIFEST: &str = "manifest.json";
pub const ROUND_LOG: &str = "round_log.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CLUSTERING: &str = "clustering.json";
pub const STATE: &str = "state.json";
pub const ADAPT_CSV: &str = "adapt.csv";

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub engine_version: String,
    pub config: ExperimentConfig,
    /// Paths relative to the run directory, including the manifest itself.
    pub files: Vec<String>,
}

/// Everything about a trained federation except the adapters.
#[derive(Debug, Serialize, Deserialize)]
struct RunState {
    assignment: ClusterAssignment,
    root_report: StageReport,
    cluster_reports: Vec<StageReport>,
    leaf_report: StageReport,
    leaf_rounds: Vec<usize>,
    round_log: Vec<RoundLogRow>,
}

#[derive(Debug, Serialize)]
struct ClusteringJson<'a> {
    k_star: usize,
    sigma: f64,
    eigenvalues: &'a [f64],
    eigengaps: &'a [f64],
    labels: &'a [usize],
    distance_matrix: Vec<Vec<f64>>,
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn clustering_json(a: &ClusterAssignment) -> Result<Vec<u8>> {
    let doc = ClusteringJson {
        k_star: a.k_star,
        sigma: a.sigma,
        eigenvalues: &a.eigenvalues,
        eigengaps: &a.eigengaps,
        labels: &a.labels,
        distance_matrix: rows(&a.distance_matrix),
    };
    to_json(&doc, Path::new(CLUSTERING))
}

fn to_json(value: &impl Serialize, name: &Path) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::json(name, e))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Collects written files relative to the output directory.
struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        create_dir(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut out = BufWriter::new(file);
        f(&mut out)?;
        out.flush().map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        self.write(name, |w| w.write_all(bytes).map_err(|e| CliError::io(path, e)))
    }
}

fn root_checkpoint() -> String {
    "checkpoints/root.hlra".into()
}

fn cluster_checkpoint(j: usize) -> String {
    format!("checkpoints/cluster_{j:03}.hlra")
}

fn leaf_checkpoint(i: usize) -> String {
    format!("checkpoints/leaf_{i:03}.hlra")
}

fn write_metrics(w: &mut Writer, report: &MetricsReport) -> Result<()> {
    w.bytes(METRICS_JSON, &to_json(report, Path::new(METRICS_JSON))?)?;
    w.write(METRICS_CSV, |out| Ok(write_metrics_csv(report, out)?))
}

fn print_summary(report: &MetricsReport) {
    println!(
        "k* = {} ({} clusters formed), {} rounds executed",
        report.k_star, report.clusters_formed, report.executed_rounds
    );
    println!(
        "mean accuracy {:.4}, worst-decile {:.4}",
        report.mean_acc, report.worst_decile_acc
    );
    let s = &report.stage_mean_acc;
    println!(
        "stage accuracy: root {:.4}, root+cluster {:.4}, full {:.4}",
        s.root, s.root_cluster, s.full
    );
    if let Some(q) = &report.clustering {
        println!("clustering vs. generator groups: ARI {:.4}, NMI {:.4}", q.ari, q.nmi);
    }
}

/// Trains, evaluates and writes every artifact into `out`.
pub fn run(cfg: &ExperimentConfig, workers: usize, out: &Path) -> Result<()> {
    cfg.validate()?;
    let data = cfg.build_data()?;
    let model = cfg.build_model(&data)?;
    let exec = Executor::new(workers)?;
    log::info!(
        "{} participating and {} unseen clients, {} workers",
        data.clients.len(),
        data.unseen.len(),
        exec.workers()
    );
    let fed = run_protocol(&cfg.federation, &model, &data, &exec)?;
    let report = evaluate(&model, &fed, &data)?;

    let mut w = Writer::new(out)?;
    w.write(ROUND_LOG, |out| Ok(write_round_log(&fed.round_log, out)?))?;
    write_metrics(&mut w, &report)?;
    w.bytes(CLUSTERING, &clustering_json(&fed.server.assignment)?)?;
    let state = RunState {
        assignment: fed.server.assignment.clone(),
        root_report: fed.root_report.clone(),
        cluster_reports: fed.cluster_reports.clone(),
        leaf_report: fed.leaf_report.clone(),
        leaf_rounds: fed.leaf_rounds.clone(),
        round_log: fed.round_log.clone(),
    };
    w.bytes(STATE, &to_json(&state, Path::new(STATE))?)?;
    let adapters = std::iter::once((root_checkpoint(), &fed.server.root))
        .chain(fed.server.clusters.iter().enumerate().map(|(j, a)| (cluster_checkpoint(j), a)))
        .chain(fed.leaves.iter().enumerate().map(|(i, a)| (leaf_checkpoint(i), a)));
    for (name, adapter) in adapters {
        w.write(&name, |out| Ok(write_adapter(adapter, out)?))?;
    }
    w.files.push(MANIFEST.into());
    let manifest = Manifest {
        engine_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        files: w.files.clone(),
    };
    let bytes = to_json(&manifest, Path::new(MANIFEST))?;
    w.files.pop();
    w.bytes(MANIFEST, &bytes)?;

    print_summary(&report);
    println!("wrote {} files to {}", w.files.len(), out.display());
    Ok(())
}

pub fn read_manifest(run_dir: &Path) -> Result<Manifest> {
    let path = run_dir.join(MANIFEST);
    let file = File::open(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| CliError::json(path, e))
}

fn load_adapter(run_dir: &Path, name: &str) -> Result<LoraAdapter> {
    let path = run_dir.join(name);
    if !path.is_file() {
        return Err(CliError::MissingCheckpoint(path));
    }
    let file = File::open(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(read_adapter(BufReader::new(file))?)
}

/// Rebuilds a trained federation from a run directory.
fn load_run(run_dir: &Path) -> Result<(ExperimentConfig, TrainedFederation)> {
    let manifest = read_manifest(run_dir)?;
    let path = run_dir.join(STATE);
    let file = File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let state: RunState =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| CliError::json(&path, e))?;
    let root = load_adapter(run_dir, &root_checkpoint())?;
    let clusters = (0..state.assignment.cluster_count())
        .map(|j| load_adapter(run_dir, &cluster_checkpoint(j)))
        .collect::<Result<Vec<_>>>()?;
    let leaves = (0..state.assignment.labels.len())
        .map(|i| load_adapter(run_dir, &leaf_checkpoint(i)))
        .collect::<Result<Vec<_>>>()?;
    let fed = TrainedFederation {
        config: manifest.config.federation.clone(),
        server: ServerState {
            root,
            clusters,
            assignment: state.assignment,
        },
        leaves,
        root_report: state.root_report,
        cluster_reports: state.cluster_reports,
        leaf_report: state.leaf_report,
        leaf_rounds: state.leaf_rounds,
        round_log: state.round_log,
    };
    Ok((manifest.config, fed))
}

/// Recomputes the metrics of a finished run from its checkpoints.
pub fn report(run_dir: &Path, out: &Path) -> Result<()> {
    let (cfg, fed) = load_run(run_dir)?;
    let data = cfg.build_data()?;
    let model = cfg.build_model(&data)?;
    if data.clients.len() != fed.leaves.len() {
        return Err(CliError::field(
            "data",
            "regenerated data does not match the checkpointed federation",
        ));
    }
    let report = evaluate(&model, &fed, &data)?;
    let mut w = Writer::new(out)?;
    write_metrics(&mut w, &report)?;
    print_summary(&report);
    println!("wrote metrics to {}", out.display());
    Ok(())
}

/// Runs the root stage and clustering only, printing the clustering JSON.
pub fn cluster_diag(cfg: &ExperimentConfig, workers: usize, out: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let data = cfg.build_data()?;
    let model = cfg.build_model(&data)?;
    let exec = Executor::new(workers)?;
    let root = run_root_stage(&cfg.federation, &model, &data, &exec)?;
    let assignment = cluster_after_root(&cfg.federation, &root.tracker)?;
    if let Some(reason) = &assignment.fallback {
        log::warn!("clustering fell back to a single cluster: {reason}");
    }
    let bytes = clustering_json(&assignment)?;
    match out {
        Some(dir) => {
            let mut w = Writer::new(dir)?;
            w.bytes(CLUSTERING, &bytes)?;
            println!("wrote {}", dir.join(CLUSTERING).display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(&bytes)
                .map_err(|e| CliError::io("<stdout>", e))?;
        }
    }
    Ok(())
}

/// Routes and fine-tunes every unseen client of a finished run.
pub fn adapt(run_dir: &Path, out: &Path) -> Result<()> {
    let (cfg, fed) = load_run(run_dir)?;
    let data = cfg.build_data()?;
    if data.unseen.is_empty() {
        return Err(CliError::field(
            "data.unseen_fraction",
            "the run holds out no unseen clients",
        ));
    }
    let model = cfg.build_model(&data)?;
    let mut rows = Vec::new();
    for client in &data.unseen {
        let outcome = adapt_unseen(&cfg.federation, &cfg.adapt, &model, client, &fed.server)?;
        log::info!(
            "unseen client {} -> cluster {} (scores {:?})",
            client.id,
            outcome.assigned_cluster,
            outcome.scores
        );
        rows.push(outcome);
    }
    let mut w = Writer::new(out)?;
    w.write(ADAPT_CSV, |out| {
        let mut text = String::from("client_id,assigned_cluster,epoch,test_accuracy\n");
        for o in &rows {
            for (epoch, acc) in o.trajectory.iter().enumerate() {
                text.push_str(&format!("{},{},{epoch},{acc}\n", o.client_id, o.assigned_cluster));
            }
        }
        out.write_all(text.as_bytes())
            .map_err(|e| CliError::io(ADAPT_CSV, e))
    })?;
    let first = hilora::eval::mean(&rows.iter().map(|o| o.trajectory[0]).collect::<Vec<_>>());
    let last = hilora::eval::mean(
        &rows.iter().map(|o| *o.trajectory.last().expect("trajectory")).collect::<Vec<_>>(),
    );
    println!(
        "{} unseen clients: mean accuracy {first:.4} at routing, {last:.4} after {} epochs",
        rows.len(),
        cfg.adapt.epochs
    );
    println!("wrote {}", out.join(ADAPT_CSV).display());
    Ok(())
}

/// Finite-difference check of the analytic tier gradients.
pub fn gradcheck(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let (input_dim, classes) = match &cfg.data.source {
        crate::config::DataSource::Synthetic(s) => (s.feature_dim, s.classes),
        crate::config::DataSource::Csv(_) => {
            let data = cfg.build_data()?;
            (data.feature_dim, data.class_count)
        }
    };
    let dims = GradcheckDims {
        input_dim,
        hidden: cfg.model.hidden,
        classes,
        rank: cfg.federation.rank,
    };
    let mut rng = rng::stream(cfg.federation.master_seed, &[TAG_GRADCHECK]);
    let report = gradcheck_suite(cfg.gradcheck.cases, dims, cfg.gradcheck.step, &mut rng)?;
    println!(
        "max relative error: {:.3e} over {} cases",
        report.max_rel_error,
        report.cases.len()
    );
    if report.max_rel_error > cfg.gradcheck.tolerance {
        return Err(CliError::Gradcheck {
            max: report.max_rel_error,
            tolerance: cfg.gradcheck.tolerance,
        });
    }
    Ok(())
}
