use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fedyolo_cli::config::{validate, ExperimentConfig};
use fedyolo_cli::{execute, report, Error};
use serde_json::{json, Value};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bundled() -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![configs_dir()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "json") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn every_bundled_config_validates() {
    let all = bundled();
    assert!(all.len() >= 15, "{all:?}");
    for path in all {
        match fedyolo_cli::validate_file(&path) {
            Ok(c) => assert_eq!(c.schema_version, 1),
            // CIFAR-10 batches are not shipped; only the path may be missing.
            Err(errs) => {
                assert!(path.to_string_lossy().contains("cifar10"), "{}: {errs:?}", path.display());
                assert_eq!(errs.len(), 1, "{errs:?}");
                assert!(errs[0].starts_with("tasks[0].data.path:"), "{errs:?}");
            }
        }
    }
}

/// A bundled config cut down to `rounds` rounds with a light pretraining.
fn shrunk(name: &str, rounds: usize) -> ExperimentConfig {
    let text = fs::read_to_string(configs_dir().join(name)).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["fed"]["rounds"] = rounds.into();
    v["pretrain"] = json!({"classes": 4, "samples_per_class": 8, "epochs": 1});
    validate(&v.to_string(), Path::new(".")).unwrap()
}

#[test]
fn three_task_run_writes_per_task_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = shrunk("multitask/k3.json", 2);
    let (out, result) = execute(&cfg, Some(dir.path())).unwrap();
    assert_eq!(result.num_tasks, 3);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "round,global_acc,mean_local_acc,task0_acc,task1_acc,task2_acc,loss"
    );
    for k in 0..3 {
        assert!(out.join(format!("checkpoints/task{k}.json")).is_file());
    }
    let comm = fs::read_to_string(out.join("comm.csv")).unwrap();
    assert_eq!(comm.lines().next().unwrap(), "round,client,task,dir,params,bytes");
}

#[test]
fn rerun_is_byte_identical_and_result_embeds_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = shrunk("quickstart.json", 3);
    let (a, _) = execute(&cfg, Some(&dir.path().join("a"))).unwrap();
    let (b, _) = execute(&cfg, Some(&dir.path().join("b"))).unwrap();
    for f in ["metrics.csv", "comm.csv", "trace.csv", "partitions.json", "checkpoints/global.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ra = report::load_result(&a).unwrap();
    let rb = report::load_result(&b).unwrap();
    assert_eq!(ra.config, cfg);
    assert_eq!(ra.input_hash, rb.input_hash);
    assert_eq!(ra.input_hash.len(), 64);
    assert_eq!(ra.result, rb.result);
}

#[test]
fn seed_changes_the_hash_and_the_run() {
    let cfg = shrunk("quickstart.json", 2);
    let other = cfg.clone().with_seed(5);
    assert_eq!(other.fed.seed, 5);
    assert_ne!(
        fedyolo_cli::experiment::input_hash(&cfg).unwrap(),
        fedyolo_cli::experiment::input_hash(&other).unwrap()
    );
}

#[test]
fn report_single_run_and_ratio_column() {
    let dir = tempfile::tempdir().unwrap();
    let modular = shrunk("scale/micro_modular.json", 2);
    let full = shrunk("scale/micro_full.json", 2);
    let (m, _) = execute(&modular, Some(&dir.path().join("modular"))).unwrap();

    let one = report::tabulate(std::slice::from_ref(&m)).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].comm_ratio, None);
    assert_eq!(report::render_text(&one).lines().count(), 2);

    let (f, _) = execute(&full, Some(&dir.path().join("full"))).unwrap();
    let rows = report::tabulate(&[f, m]).unwrap();
    assert_eq!(rows[0].comm_ratio, Some(1.0));
    let ratio = rows[1].comm_ratio.unwrap();
    // micro: 27,748 full parameters against 1,236 + 10-class head difference.
    let expected = (27_616.0 + 32.0 * 10.0 + 10.0) / (1_104.0 + 32.0 * 10.0 + 10.0);
    assert!((ratio - expected).abs() < 1e-9, "{ratio} vs {expected}");
    assert!(!rows[1].flagged());
    let mut csv = Vec::new();
    report::write_csv(&rows, &mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("run,scheme,update_mode,model,module,tasks,global_acc"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn report_hetero_drop_pairs_with_homogeneous_run() {
    let dir = tempfile::tempdir().unwrap();
    let (h, _) = execute(&shrunk("hetero/homog.json", 2), Some(&dir.path().join("homog"))).unwrap();
    let (m, _) = execute(&shrunk("hetero/more.json", 2), Some(&dir.path().join("more"))).unwrap();
    let rows = report::tabulate(&[h, m]).unwrap();
    assert_eq!(rows[0].hetero_drop, None);
    let want = (rows[0].global_acc - rows[1].global_acc) / rows[0].global_acc;
    assert!((rows[1].hetero_drop.unwrap() - want).abs() < 1e-12);
}

#[test]
fn report_rejects_other_schema_versions_and_missing_results() {
    let dir = tempfile::tempdir().unwrap();
    let (run, _) = execute(&shrunk("quickstart.json", 1), Some(&dir.path().join("r"))).unwrap();
    let path = run.join("result.json");
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["schema_version"] = 2.into();
    fs::write(&path, v.to_string()).unwrap();
    let err = report::tabulate(&[run]).unwrap_err();
    assert!(matches!(err, Error::SchemaVersion { found: 2, expected: 1, .. }), "{err}");
    assert!(err.to_string().contains("schema version 2, expected 1"));

    let err = report::tabulate(&[dir.path().join("nowhere")]).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    fs::create_dir_all(dir.path().join("bad")).unwrap();
    fs::write(dir.path().join("bad/result.json"), "{not json").unwrap();
    let err = report::tabulate(&[dir.path().join("bad")]).unwrap_err();
    assert!(matches!(err, Error::Corrupt { .. }), "{err}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedyolo"))
}

#[test]
fn validate_command_reports_errors_and_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"model": "micro", "scheme": "", "fed": {"clients_per_round": 1, "lr_peak": 0.1, "momentum": 1.5}, "tasks": []}"#,
    )
    .unwrap();
    let out = bin().args(["validate"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for line in [
        "scheme: required",
        "tasks: needs at least one task",
        "fed.momentum: 1.5 is outside [0, 1)",
    ] {
        assert!(err.contains(line), "{err}");
    }

    let out = bin()
        .args(["validate"])
        .arg(configs_dir().join("quickstart.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let echo: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(echo["fed"]["momentum"], 0.9);
    assert_eq!(echo["fed"]["batch_size"], 32);
    assert_eq!(echo["fed"]["warmup_fraction"], 0.1);
}

#[test]
fn invalid_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"model": "micro", "scheme": "fedprox", "fed": {"clients_per_round": 1, "lr_peak": 0.1}, "tasks": []}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = bin().args(["run"]).arg(&bad).arg("--out").arg(&out_dir).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fed.prox_mu: required for fedprox"));
    assert!(!out_dir.exists());
}

#[test]
fn count_params_single_entry() {
    let out = bin().args(["count-params", "vit_b", "adapter"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("vit_b Adapter: 233,668 trainable (76,900 head)"), "{text}");
    let out = bin().args(["count-params", "vit_b", "bitfit"]).output().unwrap();
    assert!(!out.status.success());
}
