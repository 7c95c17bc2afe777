use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_enkf-lab"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn exactness_config(tolerance: &str) -> String {
    let model = configs().join("models/affine_1d.json");
    format!(
        r#"{{
  "kind": "exactness",
  "seed": 3,
  "model_file": "{}",
  "steps": 10,
  "data_seed": 7,
  "tolerances": {{ "max_abs_error": {tolerance} }}
}}"#,
        model.display()
    )
}

#[test]
fn exactness_run_passes_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &exactness_config("1e-12"));
    let out = dir.path().join("out");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "99"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS mean-field vs Kalman"));

    let csv = std::fs::read_to_string(out.join("mean_field_vs_kalman.csv")).unwrap();
    assert!(csv.starts_with("step,mean_error,cov_error\r\n"));
    assert_eq!(csv.lines().count(), 12);

    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], true);
    assert_eq!(summary["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(summary["config"]["seed"], 99);
    assert_eq!(summary["config"]["model"]["dynamics"]["kind"], "affine");
    assert!(summary["config"].get("model_file").is_none());
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("run_meta.json")).unwrap()).unwrap();
    assert!(meta["started_unix_s"].as_u64().unwrap() > 0);
}

#[test]
fn tolerance_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &exactness_config("0.0"));
    let out = dir.path().join("out");
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert!(out.join("summary.json").exists());
}

#[test]
fn unknown_kind_exits_with_one_and_a_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", "{\n  \"kind\": \"warp-drive\",\n  \"seed\": 1,\n  \"tolerances\": {}\n}");
    for sub in ["run", "validate"] {
        let o = run(&[sub, "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1));
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("line 2") && err.contains("warp-drive"), "{err}");
    }
}

#[test]
fn missing_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{ "kind": "lipschitz-suite", "seed": 1, "tolerances": { "slack": 1e-10, "slope_deviation": 0.15 } }"#);
    let o = run(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`instances`"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["run"]).status.code(), Some(1));
    assert_eq!(run(&["run", "--config", "/nonexistent/c.json"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn shipped_configs_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let o = run(&["validate", "--config", path.to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(0), "{}: {}", path.display(), String::from_utf8_lossy(&o.stderr));
            n += 1;
        }
    }
    assert_eq!(n, 9);
}

#[test]
fn thread_count_does_not_change_the_tables() {
    let dir = tempfile::tempdir().unwrap();
    let model = configs().join("models/affine_1d.json");
    let body = format!(
        r#"{{ "kind": "chaos", "seed": 4, "model_file": "{}", "steps": 3, "data_seed": 1,
             "n_list": [16, 32], "replicates": 6, "tolerances": {{ "ratio_max": 100.0 }} }}"#,
        model.display()
    );
    let cfg = write_config(dir.path(), "c.json", &body);
    let mut bodies = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("out{threads}"));
        let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", threads]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        bodies.push(std::fs::read(out.join("discrepancy.csv")).unwrap());
    }
    assert_eq!(bodies[0], bodies[1]);
}
