use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn regnoise(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regnoise"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn regnoise_with_workers(args: &[&str], out: &Path, workers: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regnoise"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("REGNOISE_WORKERS", workers)
        .output()
        .expect("binary runs")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(k).unwrap().parse().unwrap()).collect()
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = regnoise(&["simulate", "--set", "flow.no_such_key=3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn unknown_config_file_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[davie]\npaths = 10\nlevle = 3\n").unwrap();
    let out = regnoise(&["davie", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("levle"));
}

#[test]
fn invalid_drift_parameter_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = regnoise(&["simulate", "--set", "drift.kind=\"gaussian_bump\""], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_drift_solution_follows_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = regnoise(&["simulate", "--set", "drift.kind=\"zero\"", "--set", "run.level=8"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let w = column(&std::fs::read_to_string(dir.path().join("path.csv")).unwrap(), "w1");
    for scheme in ["nonlinear-young", "euler-maruyama"] {
        let csv = std::fs::read_to_string(dir.path().join(format!("solution_{scheme}.csv"))).unwrap();
        let y = column(&csv, "y1");
        assert_eq!(y.len(), w.len());
        assert!(y.iter().zip(&w).all(|(y, w)| y - w == 0.0));
    }
}

#[test]
fn manifest_lists_every_artifact_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let out = regnoise(&["simulate", "--set", "run.level=6", "--seed", "7"], dir.path());
    assert!(out.status.success());
    let m = manifest(dir.path());
    assert_eq!(m["subcommand"], "simulate");
    assert_eq!(m["config"]["run"]["seed"], 7);
    let hash = m["config_hash"].as_str().unwrap();
    let arts = m["artifacts"].as_array().unwrap();
    assert_eq!(arts.len(), 5);
    for a in arts {
        let bytes = std::fs::read(dir.path().join(a["path"].as_str().unwrap())).unwrap();
        let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(a["sha256"].as_str().unwrap(), digest);
        assert_eq!(a["config_hash"].as_str().unwrap(), hash);
    }
}

#[test]
fn reruns_are_byte_identical_for_any_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "flow",
        "--set",
        "drift.kind=\"sign\"",
        "--set",
        "drift.params.sigma=0.125",
        "--set",
        "run.level=9",
    ];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(regnoise_with_workers(&args, &a, "1").status.code().is_some());
    assert!(regnoise_with_workers(&args, &b, "3").status.code().is_some());
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["artifacts"], mb["artifacts"]);
    for name in ["flow.bin", "flow.csv", "flow_property.json"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn bad_worker_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = regnoise_with_workers(&["simulate"], dir.path(), "zero");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn davie_reports_the_gradient_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let out = regnoise(
        &[
            "davie",
            "--set",
            "davie.estimates=[\"gradient\"]",
            "--set",
            "davie.paths=200",
            "--set",
            "davie.level=10",
        ],
        dir.path(),
    );
    assert!(out.status.code() == Some(0) || out.status.code() == Some(1));
    let r: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("davie_gradient.json")).unwrap()).unwrap();
    assert_eq!(r["theoretical_exponent"].as_f64().unwrap(), 0.125);
    assert_eq!(r["cells"].as_array().unwrap().len(), 8);
    assert!(dir.path().join("davie_gradient.csv").exists());
}

#[test]
fn sewing_selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = regnoise(&["sew-selftest", "--set", "sew.instances=30"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    assert_eq!(manifest(dir.path())["pass"], true);
}

#[test]
fn corrupted_solution_fails_the_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let out = regnoise(
        &[
            "flow",
            "--set",
            "drift.kind=\"sign\"",
            "--set",
            "drift.params.sigma=0.015625",
            "--set",
            "run.level=10",
            "--set",
            "flow.glue=false",
            "--set",
            "flow.certify.corruption=[0.5, 0.25]",
        ],
        dir.path(),
    );
    assert!(out.status.code().is_some());
    let cert: Value = serde_json::from_slice(&std::fs::read(dir.path().join("certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["pass"], false);
    let checks = manifest(dir.path())["checks"].clone();
    let neg = checks
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "uniqueness_negative_control")
        .unwrap()
        .clone();
    assert_eq!(neg["pass"], true);
}
