use std::path::Path;
use std::process::{Command, Output};

use hocbf_gp::experiment::config::ExperimentConfig;

fn exe() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hocbf-exp"));
    cmd.env_remove("HOCBF_OUTPUT_DIR");
    cmd
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn short_synthetic(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synthetic_default();
    cfg.sim.horizon = 6.0;
    cfg.output.directory = out.to_string_lossy().into_owned();
    cfg
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn print_defaults_emit_loadable_configs() {
    for plant in ["acc", "suspension", "synthetic"] {
        let out = exe().args(["print-defaults", plant]).output().unwrap();
        assert!(out.status.success());
        let cfg = ExperimentConfig::from_toml(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
        assert_eq!(cfg, ExperimentConfig::default_for(plant).unwrap());
    }
}

#[test]
fn bad_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = exe().args(["run"]).arg(dir.path().join("absent.toml")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let text = ExperimentConfig::synthetic_default().to_toml().unwrap();
    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, format!("colour = \"blue\"\n{text}")).unwrap();
    let out = exe().arg("run").arg(&unknown).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let mut cfg = ExperimentConfig::synthetic_default();
    cfg.filter.beta = -1.0;
    let invalid = write_config(dir.path(), &cfg);
    let out = exe().arg("run").arg(&invalid).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn successful_run_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("results");
    let path = write_config(dir.path(), &short_synthetic(&out_dir));
    let out = exe().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&out);
    assert_eq!(summary["all_complete"], true);
    for f in ["nominal.csv", "oracle.csv", "gp.csv", "dataset.csv", "summary.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn exhausted_training_exits_one_with_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("results");
    let mut cfg = short_synthetic(&out_dir);
    cfg.episodic.max_episodes = 1;
    let path = write_config(dir.path(), &cfg);
    let out = exe().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["gp_trained"], false);
    assert!(out_dir.join("nominal.csv").exists());
    assert!(out_dir.join("gp_episode_1.csv").exists());
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let from_config = dir.path().join("config_dir");
    let from_env = dir.path().join("env_dir");
    let from_flag = dir.path().join("flag_dir");
    let path = write_config(dir.path(), &short_synthetic(&from_config));

    let out = exe().arg("run").arg(&path).env("HOCBF_OUTPUT_DIR", &from_env).output().unwrap();
    assert!(out.status.success());
    assert!(from_env.join("summary.json").exists());
    assert!(!from_config.exists());

    let out = exe()
        .arg("run")
        .arg(&path)
        .arg("--output")
        .arg(&from_flag)
        .env("HOCBF_OUTPUT_DIR", &from_env)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(from_flag.join("summary.json").exists());
    assert!(!from_config.exists());
}

#[test]
fn kernel_validation_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = exe().args(["validate", "kernel", "--seed", "3", "--report"]).arg(&report).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let value = json(&out);
    assert_eq!(value["passed"], true);
    assert_eq!(value["seed"], 3);
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(saved, value);
}

#[test]
fn unknown_suite_is_rejected() {
    let out = exe().args(["validate", "everything"]).output().unwrap();
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
}
