use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn hilora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hilora"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn shift_config(t: [usize; 3]) -> Value {
    json!({
        "federation": {
            "rank": 2, "gamma_c": 10.0, "gamma_l": 10.0, "lr": 0.04,
            "t_root": t[0], "t_cluster": t[1], "t_leaf": t[2],
            "total_rounds": t[0] + t[1] + t[2],
            "batch": {"kind": "mini_batch", "size": 16}
        },
        "model": {"hidden": 24},
        "data": {
            "source": {
                "kind": "synthetic", "classes": 12, "feature_dim": 16, "per_class": 150,
                "separation": 3.0, "clients": 24,
                "partition": {"kind": "cluster_shift", "k_true": 3, "rotation_angle": 0.785, "label_subset_size": 4}
            },
            "unseen_fraction": 0.2
        },
        "adapt": {"probe_steps": 10, "epochs": 2}
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(dir: &Path, cfg: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(out);
    let mut args = vec!["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = hilora(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn run_writes_every_manifest_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", &shift_config([5, 8, 3]));
    let out = run(tmp.path(), &cfg, "run", &["--workers", "2"]);
    let manifest = read_json(&out.join("manifest.json"));
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    for f in &files {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    for f in ["round_log.csv", "metrics.json", "metrics.csv", "clustering.json", "manifest.json", "checkpoints/root.hlra"] {
        assert!(files.contains(&f), "{f} not listed");
    }
    // Defaults are materialized.
    assert_eq!(manifest["config"]["federation"]["lambda"], json!(0.9));
    assert_eq!(manifest["config"]["model"]["base_scale"], json!(1.0));

    let log = fs::read_to_string(out.join("round_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("stage,round,cluster,rho,weighted_train_loss,stopped"));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("client_id,cluster,acc,G_c,G_l"));
    let clustering = read_json(&out.join("clustering.json"));
    for key in ["k_star", "sigma", "eigenvalues", "eigengaps", "labels", "distance_matrix"] {
        assert!(clustering.get(key).is_some(), "{key}");
    }
}

#[test]
fn runs_are_byte_identical_across_repeats_and_workers() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", &shift_config([4, 4, 2]));
    let a = run(tmp.path(), &cfg, "a", &["--workers", "1"]);
    let b = run(tmp.path(), &cfg, "b", &["--workers", "4"]);
    for f in ["metrics.csv", "metrics.json", "round_log.csv", "clustering.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = run(tmp.path(), &cfg, "c", &["--seed", "5"]);
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(c.join("metrics.csv")).unwrap());
    assert_eq!(read_json(&c.join("manifest.json"))["config"]["federation"]["master_seed"], json!(5));
}

#[test]
fn report_reproduces_metrics_and_needs_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", &shift_config([4, 4, 2]));
    let out = run(tmp.path(), &cfg, "run", &[]);
    let rep = tmp.path().join("rep");
    let o = hilora(&["report", "--run", out.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "metrics.json"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(rep.join(f)).unwrap(), "{f}");
    }
    fs::remove_file(out.join("checkpoints/cluster_000.hlra")).unwrap();
    let o = hilora(&["report", "--run", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing checkpoint"), "{}", stderr(&o));
}

#[test]
fn root_only_run_reports_zero_gains() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", &shift_config([6, 0, 0]));
    let out = run(tmp.path(), &cfg, "run", &[]);
    let o = hilora(&["report", "--run", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("report/metrics.csv")).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0, "{line}");
        assert_eq!(cols[4].parse::<f64>().unwrap(), 0.0, "{line}");
    }
}

#[test]
fn cluster_diag_finds_three_groups() {
    let tmp = TempDir::new().unwrap();
    // The acceptance scenario: 30 clients, 200 samples per class, hidden 32.
    let mut cfg = shift_config([10, 25, 15]);
    cfg["model"]["hidden"] = json!(32);
    cfg["data"]["source"]["per_class"] = json!(200);
    cfg["data"]["source"]["clients"] = json!(30);
    cfg["data"]["unseen_fraction"] = json!(0.0);
    let cfg = write_config(tmp.path(), "cfg.json", &cfg);
    let o = hilora(&["cluster-diag", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(doc["k_star"], json!(3));
    let n = doc["labels"].as_array().unwrap().len();
    assert_eq!(doc["distance_matrix"].as_array().unwrap().len(), n);
}

#[test]
fn adapt_writes_trajectories() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", &shift_config([4, 4, 2]));
    let out = run(tmp.path(), &cfg, "run", &[]);
    let o = hilora(&["adapt", "--run", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("adapt.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("client_id,assigned_cluster,epoch,test_accuracy"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    // 24 clients, ⌈0.2·24⌉ = 5 unseen, epochs 0..=2.
    assert_eq!(rows.len(), 5 * 3);
    for r in &rows {
        let acc: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn gradcheck_on_defaults_passes() {
    let o = hilora(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let value: f64 = line
        .trim()
        .strip_prefix("max relative error: ")
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(value <= 1e-4, "{line}");
}

#[test]
fn invalid_configs_fail_with_named_field() {
    let tmp = TempDir::new().unwrap();
    let mut bad = shift_config([4, 4, 2]);
    bad["federation"]["total_rounds"] = json!(11);
    let cfg = write_config(tmp.path(), "bad.json", &bad);
    let o = hilora(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("budget rule"), "{}", stderr(&o));
    assert!(!tmp.path().join("x").exists());

    let mut bad = shift_config([4, 4, 2]);
    bad["data"]["unseen_fraction"] = json!(1.5);
    let cfg = write_config(tmp.path(), "bad2.json", &bad);
    let o = hilora(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("y").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("data.unseen_fraction"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "typo.json", &json!({"federation": {"rnak": 2}}));
    let o = hilora(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("rnak"), "{}", stderr(&o));

    let o = hilora(&["run", "--config", tmp.path().join("absent.json").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn csv_source_runs_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let mut text = String::from("client_id,label,f0,f1,f2\n");
    for client in 0..4 {
        for k in 0..30 {
            let label = (k + client) % 3;
            let x = [label as f64 * 2.0 + (k % 5) as f64 * 0.1, (client % 2) as f64, (k % 7) as f64 * 0.05];
            text.push_str(&format!("{client},{label},{},{},{}\n", x[0], x[1], x[2]));
        }
    }
    let csv = tmp.path().join("data.csv");
    fs::write(&csv, text).unwrap();
    let cfg = json!({
        "federation": {"rank": 2, "t_root": 3, "t_cluster": 2, "t_leaf": 1, "total_rounds": 6},
        "model": {"hidden": 8},
        "data": {"source": {"kind": "csv", "path": csv}, "unseen_fraction": 0.0}
    });
    let cfg = write_config(tmp.path(), "cfg.json", &cfg);
    let out = run(tmp.path(), &cfg, "run", &[]);
    let metrics = read_json(&out.join("metrics.json"));
    assert_eq!(metrics["clients"].as_array().unwrap().len(), 4);
    assert!(metrics["clustering"].is_null());
}
