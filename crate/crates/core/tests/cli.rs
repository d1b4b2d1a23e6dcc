use std::fs;
use std::path::Path;
use std::process::Command;

use phasebranch::config::{Experiment, RunConfig};
use phasebranch::WaveFunction;

fn phaselab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_phaselab"))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

#[test]
fn shipped_default_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.json");
    let cfg = RunConfig::from_path(&path).unwrap();
    assert_eq!(cfg, RunConfig::new(Experiment::AcceptAll));
}

#[test]
fn unknown_key_exits_2_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"experiment": "macro-scaling", "grid": {"points": 10}}"#).unwrap();
    let out = phaselab().arg("--config").arg(&p).arg("--quiet").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "ConfigInvalid");
}

#[test]
fn missing_config_file_exits_2() {
    let out = phaselab()
        .args(["--config", "/nonexistent/cfg.json", "--quiet"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn macro_scaling_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::new(Experiment::MacroScaling);
    let p = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("out");
    let out = phaselab()
        .arg("--config")
        .arg(&p)
        .arg("--output")
        .arg(&out_dir)
        .arg("--quiet")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "macro-scaling");
    for a in manifest["artifacts"].as_array().unwrap() {
        assert!(out_dir.join(a.as_str().unwrap()).exists(), "{a}");
    }
    let csv = fs::read_to_string(out_dir.join("width_scaling.csv")).unwrap();
    assert!(csv.starts_with("N,sigma0,t,"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 6);
}

#[test]
fn criterion_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(Experiment::McPathsum);
    // one density repeated: the error-scaling slope is undefined
    cfg.pathsum.sweep = vec![16.0, 16.0];
    cfg.pathsum.replicas = 16;
    let p = write_config(dir.path(), &cfg);
    let out = phaselab()
        .arg("--config")
        .arg(&p)
        .arg("--output")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn seed_and_experiment_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::new(Experiment::AcceptAll);
    let p = write_config(dir.path(), &cfg);
    let out = phaselab()
        .arg("--config")
        .arg(&p)
        .args(["--experiment", "macro-scaling", "--seed", "7", "--dump-config"])
        .output()
        .unwrap();
    let shown = RunConfig::from_json(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(shown.seed, 7);
    assert_eq!(shown.experiment, Experiment::MacroScaling);
}

#[test]
fn propagate_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(Experiment::Propagate);
    cfg.grid.t_total = 0.2;
    let out_dir = dir.path().join("prop");
    let outcome = phasebranch::experiments::run(&cfg, &out_dir).unwrap();
    assert!(outcome.pass);
    let f = fs::File::open(out_dir.join("psi_oracle.csv")).unwrap();
    let psi = WaveFunction::read_csv(std::io::BufReader::new(f)).unwrap();
    assert_eq!(psi.grid().len(), cfg.grid.n);
    assert!((psi.norm_sq() - 1.0).abs() < 1e-10);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["propagate"]["l2_vs_oracle"].as_f64().unwrap() < 1e-4);
}
