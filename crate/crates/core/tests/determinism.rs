use std::fs;
use std::path::Path;

use num_complex::Complex64;
use phasebranch::config::{Experiment, RunConfig};
use phasebranch::experiments::run;
use phasebranch::measurement::DetectorModel;

fn small_detector() -> DetectorModel {
    let w: f64 = 0.3;
    DetectorModel {
        n: 20,
        sigma0: 0.2,
        t_s: 0.1,
        amplitudes: vec![Complex64::new(w.sqrt(), 0.0), Complex64::new((1.0 - w).sqrt(), 0.0)],
        ..DetectorModel::two_branch(w)
    }
}

fn bytes(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn mc_pathsum_artifacts_repeat_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(Experiment::McPathsum);
    cfg.pathsum.replicas = 16;
    cfg.pathsum.sweep = vec![16.0, 32.0];
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    run(&cfg, &a).unwrap();
    run(&cfg, &b).unwrap();
    for name in ["summary.json", "mc_estimate.csv", "manifest.json"] {
        assert_eq!(bytes(&a, name), bytes(&b, name), "{name}");
    }
    cfg.seed += 1;
    run(&cfg, &c).unwrap();
    assert_ne!(bytes(&a, "mc_estimate.csv"), bytes(&c, "mc_estimate.csv"));
}

#[test]
fn branch_report_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(Experiment::BranchMc);
    cfg.detector.model = small_detector();
    cfg.ensemble.samples = 2000;
    cfg.ensemble.trajectory_stride = Some(50);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&cfg, &a).unwrap();
    run(&cfg, &b).unwrap();
    for name in ["branch_report.json", "trajectories.csv", "summary.json"] {
        assert_eq!(bytes(&a, name), bytes(&b, name), "{name}");
    }
    let report: serde_json::Value = serde_json::from_slice(&bytes(&a, "branch_report.json")).unwrap();
    let counts: u64 = report["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(counts + report["unassigned"].as_u64().unwrap(), 2000);
    let header = String::from_utf8(bytes(&a, "trajectories.csv")).unwrap();
    assert!(header.starts_with("sample,t,Q\n"));
}
