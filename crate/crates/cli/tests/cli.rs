//! End-to-end command tests against the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mirage() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mirage"))
}

fn write_config(dir: &Path, overrides: serde_json::Value) -> PathBuf {
    let mut config = serde_json::json!({
        "dataset": {
            "source": "synthetic",
            "normal_class": 0,
            "gamma": 0.0,
            "image_size": 16,
            "seed": 5,
            "synthetic": {
                "train_normals": 40,
                "train_anomaly_pool": 20,
                "test_normals": 10,
                "test_anomalies": 10
            }
        },
        "train": {
            "epochs": 1,
            "batch_size": 16,
            "min_anomalies": 4,
            "backbone": {
                "backbone": "naive",
                "in_channels": 1,
                "latent_channels": 8,
                "base_width": 4,
                "depth": 2
            },
            "disc_width": 4,
            "seed": 5
        },
        "output": {"run_root": dir.join("runs").to_str().unwrap()}
    });
    merge(&mut config, &overrides);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(base), serde_json::Value::Object(patch)) => {
            for (k, v) in patch {
                merge(base.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (base, patch) => *base = patch.clone(),
    }
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("command runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn prepare_writes_manifest_with_empty_anomalies_at_gamma_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));
    let manifest = dir.path().join("split.json");
    run_ok(mirage().args(["prepare", "--config"]).arg(&config).arg("--out").arg(&manifest));
    let split: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(split["train_anomalies"].as_array().unwrap().len(), 0);
    assert_eq!(split["train_normals"].as_array().unwrap().len(), 40);
}

#[test]
fn prepare_computes_anomaly_count_from_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        serde_json::json!({
            "dataset": {
                "gamma": 0.05,
                "synthetic": {"train_normals": 5000, "train_anomaly_pool": 300}
            }
        }),
    );
    let manifest = dir.path().join("split.json");
    run_ok(mirage().args(["prepare", "--config"]).arg(&config).arg("--out").arg(&manifest));
    let split: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    // round(5000 * 0.05 / 0.95)
    assert_eq!(split["train_anomalies"].as_array().unwrap().len(), 263);
}

#[test]
fn prepare_rejects_missing_normal_class() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));
    // drop the key
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    doc["dataset"].as_object_mut().unwrap().remove("normal_class");
    std::fs::write(&config, doc.to_string()).unwrap();
    let out = mirage().args(["prepare", "--config"]).arg(&config).output().unwrap();
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("normal_class"));
}

#[test]
fn train_writes_exactly_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));
    run_ok(mirage().args(["train", "--config"]).arg(&config));
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let run_dir = runs[0].as_ref().unwrap().path();
    let mut entries: Vec<String> = std::fs::read_dir(&run_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    assert_eq!(
        entries,
        vec!["checkpoints", "config.json", "run.json", "train.log.jsonl"]
    );
}

#[test]
fn train_refuses_duplicate_run_dir_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));
    run_ok(mirage().args(["train", "--config"]).arg(&config));
    let out = mirage().args(["train", "--config"]).arg(&config).output().unwrap();
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    run_ok(mirage().args(["train", "--force", "--config"]).arg(&config));
}

#[test]
fn rerun_reproduces_final_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config_a = write_config(
        dir.path(),
        serde_json::json!({"output": {"run_root": dir.path().join("a").to_str().unwrap()}}),
    );
    run_ok(mirage().args(["train", "--config"]).arg(&config_a));
    let config_b = dir.path().join("config_b.json");
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config_a).unwrap()).unwrap();
    doc["output"]["run_root"] = serde_json::json!(dir.path().join("b").to_str().unwrap());
    std::fs::write(&config_b, doc.to_string()).unwrap();
    run_ok(mirage().args(["train", "--config"]).arg(&config_b));

    let read_record = |root: &str| -> serde_json::Value {
        let runs: Vec<_> = std::fs::read_dir(dir.path().join(root)).unwrap().collect();
        let run_dir = runs[0].as_ref().unwrap().path();
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run.json")).unwrap()).unwrap()
    };
    let a = read_record("a");
    let b = read_record("b");
    assert_eq!(a["final_auroc"], b["final_auroc"]);
    assert_eq!(a["epochs"], b["epochs"]);
}

#[test]
fn no_adcon_flag_zeroes_the_contribution() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));
    run_ok(mirage().args(["train", "--no-adcon", "--config"]).arg(&config));
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs")).unwrap().collect();
    let run_dir = runs[0].as_ref().unwrap().path();
    for line in std::fs::read_to_string(run_dir.join("train.log.jsonl"))
        .unwrap()
        .lines()
    {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        if record["kind"] == "step" {
            assert_eq!(record["l_adcon"].as_f64().unwrap(), 0.0);
        }
    }
}

#[test]
fn evaluate_roundtrips_the_recorded_auroc() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({"dataset": {"gamma": 0.2}}));
    let manifest = dir.path().join("split.json");
    run_ok(mirage().args(["prepare", "--config"]).arg(&config).arg("--out").arg(&manifest));
    run_ok(
        mirage()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--manifest")
            .arg(&manifest),
    );
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs")).unwrap().collect();
    let run_dir = runs[0].as_ref().unwrap().path();
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run.json")).unwrap()).unwrap();

    let checkpoint = run_dir.join("checkpoints/last");
    run_ok(
        mirage()
            .args(["evaluate", "--checkpoint"])
            .arg(&checkpoint)
            .arg("--manifest")
            .arg(&manifest),
    );
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("eval/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["auroc"], record["final_auroc"]);

    // evaluating again produces byte-identical artifacts
    let first = std::fs::read(run_dir.join("eval/report.json")).unwrap();
    let first_csv = std::fs::read(run_dir.join("eval/report.csv")).unwrap();
    run_ok(
        mirage()
            .args(["evaluate", "--checkpoint"])
            .arg(&checkpoint)
            .arg("--manifest")
            .arg(&manifest),
    );
    assert_eq!(std::fs::read(run_dir.join("eval/report.json")).unwrap(), first);
    assert_eq!(std::fs::read(run_dir.join("eval/report.csv")).unwrap(), first_csv);

    // the run directory is self-describing: no manifest needed
    let self_out = dir.path().join("self_eval");
    run_ok(
        mirage()
            .args(["evaluate", "--checkpoint"])
            .arg(&checkpoint)
            .arg("--out")
            .arg(&self_out),
    );
    let self_report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(self_out.join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(self_report["auroc"], record["final_auroc"]);
}

#[test]
fn evaluate_rejects_incompatible_shapes_with_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));
    let manifest = dir.path().join("split.json");
    run_ok(mirage().args(["prepare", "--config"]).arg(&config).arg("--out").arg(&manifest));
    run_ok(mirage().args(["train", "--config"]).arg(&config));
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs")).unwrap().collect();
    let run_dir = runs[0].as_ref().unwrap().path();

    // image size indivisible by the generator's stride stages cannot be scored
    let bad_config = dir.path().join("bad.json");
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    doc["dataset"]["image_size"] = serde_json::json!(18);
    std::fs::write(&bad_config, doc.to_string()).unwrap();

    let out = mirage()
        .args(["evaluate", "--checkpoint"])
        .arg(run_dir.join("checkpoints/last"))
        .arg("--manifest")
        .arg(&manifest)
        .arg("--config")
        .arg(&bad_config)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 5);
}

#[test]
fn benchmark_builds_tables_and_resumes_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));
    run_ok(
        mirage()
            .args(["benchmark", "--config"])
            .arg(&config)
            .args(["--classes", "0", "--gammas", "0.0", "--seeds", "3"]),
    );
    let bench_dirs: Vec<_> = std::fs::read_dir(dir.path().join("runs")).unwrap().collect();
    let bench_root = bench_dirs[0].as_ref().unwrap().path();
    assert!(bench_root.join("table-g0.csv").exists());
    assert!(bench_root.join("combined.csv").exists());

    // rerunning skips the completed cell
    run_ok(
        mirage()
            .args(["benchmark", "--config"])
            .arg(&config)
            .args(["--classes", "0", "--gammas", "0.0", "--seeds", "3"]),
    );
    let results: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(bench_root.join("benchmark.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(results[0]["skipped"], serde_json::json!(true));

    // report over the benchmark tree reproduces the table
    run_ok(mirage().args(["report", "--from"]).arg(&bench_root));
    assert!(bench_root.join("table-g0.txt").exists());
}

#[test]
fn fetch_rejects_unknown_corpus() {
    let out = mirage().args(["fetch", "imagenet"]).output().unwrap();
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn bn_strategy_flag_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));
    let out = mirage()
        .args(["train", "--bn-strategy", "bogus", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
}
