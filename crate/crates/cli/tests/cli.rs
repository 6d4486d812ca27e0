use std::path::Path;
use std::process::{Command, Output};

use dcml_core::config::RunConfig;
use serde_json::Value;

fn dcml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcml")).args(args).output().expect("spawn dcml")
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {stderr}"))
}

fn micro_config(dir: &Path) -> String {
    let mut cfg = RunConfig::micro();
    cfg.paths.data_dir = dir.join("data");
    cfg.paths.out_dir = dir.join("runs");
    let path = dir.join("micro.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_passes_and_reports_every_entry() {
    let out = dcml(&["gradcheck", "--seed", "3", "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], Value::Bool(true));
    assert!(report["entries"].as_array().unwrap().len() > 25);
}

#[test]
fn gradcheck_fault_fails_with_json() {
    let out = dcml(&["gradcheck", "--seed", "3", "--fault", "sigmoid"]);
    assert!(!out.status.success());
    let err = error_json(&out);
    assert_eq!(err["error"], "gradcheck");
    assert_eq!(err["failed"], serde_json::json!(["primitive/sigmoid"]));
}

#[test]
fn missing_dataset_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let out = dcml(&["train", "--config", &cfg, "--stage", "race"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "dependency");
}

#[test]
fn bad_arguments_are_reported_as_json() {
    let out = dcml(&["train", "--stage", "everything", "--preset", "micro"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "config");

    let out = dcml(&["eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");

    let out = dcml(&["train", "--config", "/nonexistent/c.json"]);
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["error"], "io");
}

#[test]
fn synth_train_eval_ablate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let data = dir.path().join("data");

    let out = dcml(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("meta.json").exists());

    // stage 3 before its dependencies
    let out = dcml(&["train", "--config", &cfg, "--stage", "dcml"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "dependency");

    let out = dcml(&["train", "--config", &cfg, "--stage", "all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["written"].as_array().unwrap().len(), 4);
    let runs = dir.path().join("runs");
    for f in ["race.dck", "deaging.dck", "dcml_fold0.dck", "dcml_fold0_key.dck", "dcml.jsonl", "config.json"] {
        assert!(runs.join(f).exists(), "missing {f}");
    }

    let ckpt = runs.join("dcml_fold0.dck");
    let out = dcml(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--fold", "0", "--topk", "1,5", "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["topk"], serde_json::json!([1, 5]));
    assert_eq!(report, summary["eval"], "eval of the saved checkpoint reproduces training-time eval");

    let out = dcml(&["ablate", "--config", &cfg, "--modalities", "face,face+race+deaging", "--grid", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(runs.join("ablation.json").exists());
}
