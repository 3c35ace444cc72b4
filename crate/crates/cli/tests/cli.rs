use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ltcil_cli::{cmd_ablate, cmd_report, cmd_run, CliError, Precision, RunOptions};
use ltcil_core::eval::{average_and_last, MetricsRecord, TaskRecord};
use ltcil_core::trainer::AblationMode;

const SMOKE: &str = "dataset = \"synthetic:6,20\"\nrho = 0.25\nn_max = 20\nsplit = \"B1-1\"\nepochs = 1\nbatch_size = 4\n\
pool_size = 3\nbottleneck = 4\nimage_size = 8\npatch_size = 4\nembed_dim = 16\ndepth = 1\nheads = 2\nmlp_ratio = 2\n";

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn options(config: PathBuf, out: &Path) -> RunOptions {
    RunOptions { config, out: Some(out.to_path_buf()), ..RunOptions::default() }
}

fn ltcil(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ltcil")).args(args).output().unwrap()
}

#[test]
fn run_writes_one_record_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let outcome = cmd_run(&options(write_config(dir.path(), SMOKE), &out)).unwrap();

    let records: Vec<TaskRecord> =
        fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 6);
    assert!(records.iter().enumerate().all(|(i, r)| r.task == i && r.classes_seen == i + 1));
    assert!(records.iter().all(|r| r.config_hash == outcome.summary.config_hash));

    // the headline numbers recomputed from the per-task records
    let curve: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let (avg, last) = average_and_last(&curve).unwrap();
    let m: &MetricsRecord = &outcome.summary.metrics;
    assert_eq!((m.average, m.last), (avg, last));
    assert!(m.consistent());

    assert_eq!(fs::read_to_string(out.join("manifest.jsonl")).unwrap().lines().count(), 6);
    for k in 0..6 {
        assert!(out.join(format!("checkpoints/task{k}.ckpt")).is_file());
    }
    for f in ["per_class.csv", "assigner_weights.csv"] {
        let text = fs::read_to_string(out.join(f)).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_hash={}", m.config_hash));
    }
    assert!(!out.join(".lock").exists());
}

#[test]
fn ten_class_one_step_split_emits_six_records() {
    let dir = tempfile::tempdir().unwrap();
    let text = "dataset = \"synthetic:10,40\"\nn_max = 40\nrho = 0.1\nsplit = \"B5-1\"\nepochs = 2\nimage_size = 8\nembed_dim = 16\ndepth = 1\n";
    let out = dir.path().join("run");
    let status = ltcil(&["run", "--config", write_config(dir.path(), text).to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 6);
}

#[test]
fn seed_and_mode_overrides_change_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMOKE);
    let base = cmd_run(&options(config.clone(), &dir.path().join("a"))).unwrap();
    let seeded = cmd_run(&RunOptions { seed: Some(9), ..options(config.clone(), &dir.path().join("b")) }).unwrap();
    let moded = cmd_run(&RunOptions { mode: Some(AblationMode::NoPool), ..options(config, &dir.path().join("c")) }).unwrap();
    assert_ne!(base.summary.config_hash, seeded.summary.config_hash);
    assert_ne!(base.summary.config_hash, moded.summary.config_hash);
    assert_ne!(base.stream_fingerprint, seeded.stream_fingerprint);
    assert_eq!(base.stream_fingerprint, moded.stream_fingerprint);
    assert_eq!(moded.summary.mode, AblationMode::NoPool);
}

#[test]
fn precisions_both_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMOKE);
    let single = cmd_run(&RunOptions { precision: Precision::F32, ..options(config, &dir.path().join("f32")) }).unwrap();
    assert_eq!(single.summary.precision, Precision::F32);
    assert_eq!(single.summary.metrics.accuracies.len(), 6);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &format!("{SMOKE}learning_rate = 0.1\n"));
    let out = ltcil(&["run", "--config", config.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 15") && err.contains("learning_rate"), "{err}");

    let config = write_config(dir.path(), &SMOKE.replace("embed_dim = 16", "embed_dim = 15"));
    let out = ltcil(&["run", "--config", config.to_str().unwrap(), "--out", dir.path().join("y").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`heads`"));

    let config = write_config(dir.path(), &format!("dataset = \"cifar100-binary:{}\"\n", dir.path().join("absent").display()));
    let out = ltcil(&["run", "--config", config.to_str().unwrap(), "--out", dir.path().join("w").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("field `dataset`"));

    let missing = ltcil(&["run", "--config", dir.path().join("nope.toml").to_str().unwrap(), "--out", "z"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cifar");
    fs::create_dir(&data).unwrap();
    fs::write(data.join("train.bin"), vec![0u8; 3075]).unwrap();
    fs::write(data.join("test.bin"), vec![0u8; 3074]).unwrap();
    let config = write_config(dir.path(), &format!("dataset = \"cifar100-binary:{}\"\n", data.display()));
    let out = ltcil(&["run", "--config", config.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("load-dataset") && err.contains("byte offset"), "{err}");

    let report = ltcil(&["report", dir.path().join("nothing").to_str().unwrap()]);
    assert_eq!(report.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&report.stderr).contains("config.json"));
}

#[test]
fn a_locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), b"").unwrap();
    let err = cmd_run(&options(write_config(dir.path(), SMOKE), &out)).unwrap_err();
    assert!(matches!(err, CliError::Runtime { .. }), "{err}");
    assert!(err.to_string().contains("locked"));
}

#[test]
fn report_recomputes_and_refuses_mixed_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMOKE);
    let a = dir.path().join("a");
    let outcome = cmd_run(&options(config.clone(), &a)).unwrap();
    let report = cmd_report(&a).unwrap();
    assert_eq!(report.average, outcome.summary.metrics.average);
    assert_eq!(report.last, outcome.summary.metrics.last);
    assert_eq!(report.reference_exemplars, 325);
    assert!(a.join("report.txt").is_file());
    let rows = fs::read_to_string(a.join("assigner_weights_by_frequency.csv")).unwrap();
    let mut lines = rows.lines();
    assert_eq!(lines.next().unwrap(), format!("# config_hash={}", report.config_hash));
    assert_eq!(lines.next().unwrap(), "count,classes,instances,mean_weight");
    let distinct: std::collections::BTreeSet<usize> = outcome.weights.iter().map(|w| w.count).collect();
    assert_eq!(lines.count(), distinct.len());
    let instances: usize = report.by_frequency.iter().map(|r| r.instances).sum();
    assert_eq!(instances, outcome.weights.len());

    // splice in a metrics file from a run with a different configuration
    let b = dir.path().join("b");
    cmd_run(&RunOptions { seed: Some(3), ..options(config, &b) }).unwrap();
    fs::copy(b.join("metrics.jsonl"), a.join("metrics.jsonl")).unwrap();
    let err = cmd_report(&a).unwrap_err().to_string();
    assert!(err.contains("metrics.jsonl") && err.contains("refusing"), "{err}");

    fs::write(b.join("summary.json"), "{").unwrap();
    let err = cmd_report(&b).unwrap_err().to_string();
    assert!(err.contains("summary.json"), "{err}");
}

#[test]
fn ablate_covers_every_mode_on_a_shared_stream() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &SMOKE.replace("split = \"B1-1\"", "split = \"B3-3\""));
    let report = cmd_ablate(&options(config, dir.path()), &[0, 1]).unwrap();
    assert_eq!(report.rows.len(), 8);
    assert_eq!(report.means.len(), 4);
    for seed in [0, 1] {
        let fps: Vec<&str> = report.rows.iter().filter(|r| r.seed == seed).map(|r| r.stream_fingerprint.as_str()).collect();
        assert!(fps.windows(2).all(|w| w[0] == w[1]));
    }
    assert!(report.rows.iter().filter(|r| r.mode == AblationMode::Full).all(|r| r.weight_trend.is_some()));
    assert!(dir.path().join("no_pool/seed1/summary.json").is_file());
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}
