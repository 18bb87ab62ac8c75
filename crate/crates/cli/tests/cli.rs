use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn paper_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../paper.cfg")
}

fn rejuv(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rejuv"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_config_is_a_config_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = rejuv(&["verify", "--config", "absent.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).trim().is_empty());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[design]\nepsilon = 0.1\n").unwrap();
    let out = rejuv(&["design", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[design]\neps_sc = 0.001\neps_tc = 0.01\n").unwrap();
    let out = rejuv(&["design", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_reports_and_large_tuc_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = paper_cfg();
    let cfg = cfg.to_str().unwrap();
    let out = rejuv(&["verify", "--config", cfg, "--tuc", "5.0"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = read_json(&dir.path().join("out/design.json"));
    assert_eq!(report["verify"]["report"]["pass"], false);
    assert_eq!(report["verify"]["report"]["t_uc"], 5.0);
    assert_eq!(report["p"].as_array().unwrap().len(), 12);
}

#[test]
fn simulate_requires_certification_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = paper_cfg();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(
        rejuv(&["verify", "--config", cfg], dir.path())
            .status
            .code(),
        Some(0)
    );
    let report = read_json(&dir.path().join("out/design.json"));
    let certified = report["verify"]["report"]["pass"].as_bool().unwrap();

    let plain = rejuv(&["simulate", "--config", cfg], dir.path());
    if certified {
        assert_eq!(plain.status.code(), Some(0));
    } else {
        assert_eq!(plain.status.code(), Some(1));
        assert!(!dir.path().join("out/trace.csv").exists());
    }

    let forced = rejuv(
        &["simulate", "--config", cfg, "--force", "--seed", "5"],
        dir.path(),
    );
    assert_eq!(
        forced.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&forced.stderr)
    );
    let first = std::fs::read(dir.path().join("out/trace.csv")).unwrap();
    let summary = read_json(&dir.path().join("out/summary.json"));
    assert_eq!(summary["seed"], 5);
    assert_eq!(summary["outcome"]["completed"], true);

    // Idempotent outputs.
    assert_eq!(
        rejuv(
            &["simulate", "--config", cfg, "--force", "--seed", "5"],
            dir.path()
        )
        .status
        .code(),
        Some(0)
    );
    assert_eq!(
        first,
        std::fs::read(dir.path().join("out/trace.csv")).unwrap()
    );

    let plots = rejuv(&["export-plots", "--config", cfg], dir.path());
    assert_eq!(plots.status.code(), Some(0));
    let ellipses = std::fs::read_to_string(dir.path().join("out/ellipses.csv")).unwrap();
    let n_refs = summary["references"].as_array().unwrap().len();
    assert_eq!(ellipses.lines().count(), 1 + n_refs * 3 * 3 * 64);
}

#[test]
fn stale_report_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = paper_cfg();
    assert_eq!(
        rejuv(&["design", "--config", cfg.to_str().unwrap()], dir.path())
            .status
            .code(),
        Some(0)
    );
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("q = [50.0, 50.0, 50.0", "q = [60.0, 50.0, 50.0");
    let changed = dir.path().join("changed.cfg");
    std::fs::write(&changed, text).unwrap();
    let out = rejuv(
        &["simulate", "--config", changed.to_str().unwrap(), "--force"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}
