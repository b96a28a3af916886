use std::process::Command;

use mmkd::pipeline::PipelineConfig;

fn mmkd() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mmkd"));
    c.env_remove("MMKD_SEED").env("RUST_LOG", "off");
    c
}

#[test]
fn negative_loss_weight_is_rejected_before_any_stage_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = serde_json::to_value(PipelineConfig::desk(7)).unwrap();
    cfg["distill"]["kd_weights"]["alpha1"] = serde_json::json!(-0.1);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = dir.path().join("run");
    let status = mmkd()
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .args(["run-all", "--check"])
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("alpha1"));
    assert!(!out.join("report.json").exists());
}

#[test]
fn single_class_corpus_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmkd()
        .arg("--out")
        .arg(dir.path())
        .args(["synth-corpus", "--n-classes", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = mmkd().args(["run-all", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
