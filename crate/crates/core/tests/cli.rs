use std::path::Path;
use std::process::{Command, Output};

fn d2lora(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2lora")).args(args).current_dir(dir).output().expect("spawn d2lora")
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = d2lora(&["train", "--config", "absent.json", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn train_then_merge_writes_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"run": {"steps": 5}}"#).unwrap();
    assert!(d2lora(&["train", "--config", "c.json", "--out", "run"], dir.path()).status.success());
    let ckpt = std::fs::read(dir.path().join("run/adapter.d2la")).unwrap();
    assert_eq!(&ckpt[..4], b"D2LA");
    let trace = std::fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,lr,loss,eval_loss"));
    assert_eq!(trace.lines().count(), 6);

    assert!(d2lora(&["merge", "--ckpt", "run/adapter.d2la", "--out", "merged.d2la"], dir.path()).status.success());
    let layer =
        d2lora::adapter::checkpoint::decode_layer(&std::fs::read(dir.path().join("merged.d2la")).unwrap()).unwrap();
    assert!(layer.is_merged());
    assert!(layer.params().is_err());
    // A merged checkpoint cannot be merged again.
    assert_eq!(d2lora(&["merge", "--ckpt", "merged.d2la", "--out", "again.d2la"], dir.path()).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"adapter": {"rnak_plus": 4}}"#).unwrap();
    let out = d2lora(&["compare", "--config", "c.json", "--seeds", "3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rnak_plus"));
}

#[test]
fn compare_prints_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"run": {"steps": 4}}"#).unwrap();
    let out = d2lora(&["compare", "--config", "c.json", "--seeds", "3"], dir.path());
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], d2lora::train::COMPARE_HEADER);
    assert_eq!(lines.len(), 1 + 3 * 3);
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(d2lora(&["verify", "--suite", "bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(d2lora(&["verify", "--suite", "forced_failure"], dir.path()).status.code(), Some(1));
    let ok = d2lora(&["verify", "--suite", "rank", "--seed", "3"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["checks"][0]["check"], "rank");
}

#[test]
fn bench_without_iterations_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let out = d2lora(&["bench", "--dim", "32", "--batch", "4", "--iters", "0"], dir.path());
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "iter,unmerged_us,merged_us\n");
}

#[test]
fn bad_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_d2lora"))
        .args(["verify", "--suite", "rank"])
        .env("D2LORA_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
