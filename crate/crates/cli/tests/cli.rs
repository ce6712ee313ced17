//! CLI behavior: exit codes, artifact layout, and the full command surface
//! on a small synthetic dataset.

use std::path::Path;
use std::process::Command;

use mvclust::dataset::save_dataset;
use mvclust::synthetic::gaussian_blobs;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvclust"))
}

fn small_dataset(dir: &Path) {
    let ds = gaussian_blobs::<f64>(30, 2, &[4, 5], 0.1, 5).unwrap();
    save_dataset(&ds, dir).unwrap();
}

fn write_cfg(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

#[test]
fn mask_is_idempotent_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    for out in ["m1", "m2"] {
        let status = bin()
            .args(["mask", "--eta", "0.25", "--seed", "9", "--in"])
            .arg(&data)
            .arg("--out")
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(dir.path().join("m1/mask.csv")).unwrap();
    let b = std::fs::read(dir.path().join("m2/mask.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mask_zero_eta_writes_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let out = dir.path().join("masked");
    let status = bin()
        .args(["mask", "--eta", "0", "--seed", "1", "--in"])
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let mask = std::fs::read_to_string(out.join("mask.csv")).unwrap();
    assert!(mask.lines().all(|l| l == "1,1"));
    assert_eq!(mask.lines().count(), 30);
}

#[test]
fn invalid_eta_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let status = bin()
        .args(["mask", "--eta", "0.9", "--seed", "1", "--in"])
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write_cfg(&cfg, r#"{"epochs": 5, "lamda": 1.0}"#);
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write_cfg(
        &cfg,
        &format!(
            r#"{{"data": "{}", "out": "{}", "epochs": 3}}"#,
            dir.path().join("nope").display(),
            dir.path().join("out").display()
        ),
    );
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
}

#[test]
fn diverged_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let cfg = dir.path().join("cfg.json");
    // A temperature this small overflows the similarity kernel immediately.
    write_cfg(
        &cfg,
        &format!(
            r#"{{"data": "{}", "out": "{}", "epochs": 3, "k": 3, "tau": 1e-3, "hidden_dims": [8, 5]}}"#,
            data.display(),
            dir.path().join("out").display()
        ),
    );
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn eval_without_labels_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.json");
    write_cfg(
        &cfg,
        &format!(
            r#"{{"data": "{}", "out": "{}", "epochs": 3, "k": 3, "hidden_dims": [8, 5]}}"#,
            data.display(),
            run.display()
        ),
    );
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert!(status.success());

    // Strip the labels and re-evaluate.
    std::fs::remove_file(data.join("labels.csv")).unwrap();
    let mut manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap())
            .unwrap();
    // Keep the cluster count so the pipeline itself is still well-defined.
    manifest["n_clusters"] = serde_json::json!(2);
    std::fs::write(data.join("manifest.json"), manifest.to_string()).unwrap();
    let status = bin()
        .args(["eval", "--run"])
        .arg(&run)
        .arg("--data")
        .arg(&data)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
}

#[test]
fn train_eval_export_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.json");
    write_cfg(
        &cfg,
        &format!(
            r#"{{"data": "{}", "out": "{}", "epochs": 8, "k": 3, "hidden_dims": [10, 6], "eval_seeds": 2, "kmeans_restarts": 3}}"#,
            data.display(),
            run.display()
        ),
    );
    let output = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(output.status.success());
    for artifact in ["config.json", "model.bin", "history.csv", "metrics.csv"] {
        assert!(run.join(artifact).exists(), "missing {artifact}");
    }
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 9, "header plus one row per epoch");

    let status = bin().args(["eval", "--run"]).arg(&run).status().unwrap();
    assert!(status.success());

    let status = bin().args(["export", "--run"]).arg(&run).status().unwrap();
    assert!(status.success());
    let embeddings = std::fs::read_to_string(run.join("embeddings.csv")).unwrap();
    let mut lines = embeddings.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("f0,f1,"));
    assert!(header.ends_with(",label"));
    assert_eq!(
        header.matches('f').count(),
        6,
        "one column per latent dimension"
    );
    assert_eq!(lines.count(), 30);
}

#[test]
fn flag_overrides_beat_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.json");
    write_cfg(
        &cfg,
        &format!(
            r#"{{"data": "{}", "epochs": 400, "k": 3, "hidden_dims": [8, 5], "eval_seeds": 2, "kmeans_restarts": 2}}"#,
            data.display()
        ),
    );
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--epochs", "5", "--lambda", "0.5", "--out"])
        .arg(&run)
        .status()
        .unwrap();
    assert!(status.success());
    let snapshot: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["epochs"], 5);
    assert_eq!(snapshot["lambda"], 0.5);
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 6);
}

#[test]
fn ablate_writes_seven_variant_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let out = dir.path().join("ablation");
    let cfg = dir.path().join("cfg.json");
    write_cfg(
        &cfg,
        &format!(
            r#"{{"data": "{}", "out": "{}", "epochs": 6, "k": 3, "hidden_dims": [8, 5], "eval_seeds": 2, "kmeans_restarts": 2}}"#,
            data.display(),
            out.display()
        ),
    );
    let status = bin()
        .env("MVCLUST_WORKERS", "2")
        .args(["ablate", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert!(status.success());
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    let variants: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(
        variants,
        vec!["full", "wo_mff", "wo_mgf", "wo_wcl", "wo_rec", "w_cl", "w_dcl"]
    );
    for variant in &variants {
        let sub = out.join(variant);
        assert!(sub.join("history.csv").exists());
        let plot = std::fs::read_to_string(sub.join("plot.csv")).unwrap();
        assert!(plot.starts_with("epoch,acc,nmi,ari,fscore,loss"));
        assert!(plot.lines().count() > 1, "plot data rows for {variant}");
    }
}

#[test]
fn sweep_covers_lambda_grid_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let out = dir.path().join("sweep");
    let cfg = dir.path().join("cfg.json");
    write_cfg(
        &cfg,
        &format!(
            r#"{{"data": "{}", "out": "{}", "epochs": 4, "k": 3, "hidden_dims": [8, 5], "eval_seeds": 2, "kmeans_restarts": 2, "lambdas": [0.1, 1.0], "sweep_seeds": [0, 1, 2]}}"#,
            data.display(),
            out.display()
        ),
    );
    let status = bin()
        .env("MVCLUST_WORKERS", "2")
        .args(["sweep", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert!(status.success());
    let cells = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(cells.lines().count(), 7, "header plus 2x3 cells");
    let means = std::fs::read_to_string(out.join("sweep_means.csv")).unwrap();
    assert_eq!(means.lines().count(), 3, "header plus one row per lambda");
    assert!(out.join("lambda_0.1_seed_2/plot.csv").exists());
}

#[test]
fn default_lambda_grid_has_seven_values() {
    assert_eq!(mvclust::train::LAMBDA_GRID.len(), 7);
    assert_eq!(mvclust::train::LAMBDA_GRID[0], 1e-3);
    assert_eq!(mvclust::train::LAMBDA_GRID[6], 1e3);
}
