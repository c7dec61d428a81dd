//! Black-box runs of the `reserveset` binary.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "data": {"n_hours": 1024},
  "train": {"iterations": 10},
  "contextual": {"max_iterations": 30, "ma_window": 10, "hidden": [16]},
  "eval": {"bootstrap": {"reps": 200}}
}"#;

fn reserveset(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reserveset")).args(args).env("RUST_LOG", "error").output().expect("spawn")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_config_key_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"train": {"step": 0.1}}"#);
    let out = reserveset(&["gen-data", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown field") && err.contains("step"), "{err}");
}

#[test]
fn out_of_range_value_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"eval": {"tau": 0}}"#);
    let out = reserveset(&["gen-data", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval.tau"));
}

#[test]
fn zero_threads_is_a_usage_error() {
    assert_eq!(reserveset(&["--threads", "0", "selftest"]).status.code(), Some(2));
}

#[test]
fn eval_before_gen_data_asks_for_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = reserveset(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("gen-data"), "{err}");
}

#[test]
fn selftest_passes() {
    let out = reserveset(&["selftest"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{text}");
}

#[test]
fn small_end_to_end_run_writes_artifacts_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    for args in [&["gen-data"][..], &["train"], &["eval"], &["sweep", "--tau-list", "0.9,0.95"]] {
        let mut a = args.to_vec();
        a.extend(["--config", &cfg, "--out", run_s]);
        let out = reserveset(&a);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in [
        "data/dataset.csv",
        "data/system.json",
        "data/manifest.json",
        "checkpoints/decoupled/learned_static.json",
        "checkpoints/decoupled/contextual.json",
        "checkpoints/manifest.json",
        "reports/eval_decoupled.csv",
        "reports/duals_decoupled.csv",
        "reports/sweep_decoupled.csv",
        "reports/manifest.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let eval = std::fs::read_to_string(run.join("reports/eval_decoupled.csv")).unwrap();
    assert_eq!(eval.lines().count(), 5, "{eval}");
    let sweep = std::fs::read_to_string(run.join("reports/sweep_decoupled.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 4 * 2, "{sweep}");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen-data");
    assert!(m["files"]["dataset.csv"].as_str().unwrap().len() == 64);
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let read = |seed: &str| {
        let out_dir = dir.path().join(format!("s{seed}"));
        let out = reserveset(&["gen-data", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--seed", seed]);
        assert!(out.status.success());
        std::fs::read(out_dir.join("data/dataset.csv")).unwrap()
    };
    assert_ne!(read("1"), read("2"));
    assert_eq!(read("3"), read("3"));
}
