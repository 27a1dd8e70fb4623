use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const FAST: [&str; 6] = ["--sweeps", "40", "--burn-in", "20", "--chains", "2"];

fn rgflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgflow"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    sha2::Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn flow_writes_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["flow", "--T", "2.26", "--basis", "full10", "--iters", "5", "--L0", "64", "--seed", "7"];
    args.extend(FAST);
    let out = rgflow(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("flow.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 6);
    let first: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(first[0], "1");
    assert_eq!(first[3].parse::<f64>().unwrap(), 2.0 / 2.26);
    assert!((first[3].parse::<f64>().unwrap() - 0.885).abs() < 5e-4);

    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["chain"]["measure_sweeps"], 40);
    assert_eq!(manifest["outputs"]["flow.csv"], sha256_hex(csv.as_bytes()));
    assert!(manifest["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn identical_runs_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = vec!["flow", "--T", "2.3,2.2", "--iters", "3", "--L0", "16", "--seed", "3"];
    args.extend(FAST);
    assert!(rgflow(a.path(), &args).status.success());
    args.extend(["--threads", "1"]);
    assert!(rgflow(b.path(), &args).status.success());
    let x = std::fs::read(a.path().join("flow.csv")).unwrap();
    let y = std::fs::read(b.path().join("flow.csv")).unwrap();
    assert_eq!(x, y);
    assert_eq!(String::from_utf8(x).unwrap().lines().count(), 7);
}

#[test]
fn missing_temperature_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rgflow(dir.path(), &["flow", "--L0", "64"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rgflow(dir.path(), &["flow", "--T", "abc"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rgflow(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn indivisible_lattice_fails_before_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let out = rgflow(dir.path(), &["flow", "--T", "2.26", "--L0", "50", "--iters", "5"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(!dir.path().join("flow.csv").exists());
    assert_eq!(json(&dir.path().join("manifest.json"))["status"], "failed");
}

#[test]
fn scan_writes_csv_and_bracket() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["tc-scan", "--T", "1.5,4.0", "--iters", "3", "--L0", "16", "--svg"];
    args.extend(["--sweeps", "300", "--burn-in", "100", "--chains", "2"]);
    let out = rgflow(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bracket = json(&dir.path().join("bracket.json"));
    assert_eq!(bracket["bracket"], serde_json::json!([1.5, 4.0]));
    assert_eq!(std::fs::read_to_string(dir.path().join("scan.csv")).unwrap().lines().count(), 3);
    assert!(std::fs::read_to_string(dir.path().join("scan.svg")).unwrap().starts_with("<svg"));
    let manifest = json(&dir.path().join("manifest.json"));
    assert!(manifest["outputs"].get("scan.svg").is_none());
    assert_eq!(manifest["plots"][0], "scan.svg");
}

#[test]
fn single_temperature_scan_warns() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["tc-scan", "--T", "2.27", "--iters", "3", "--L0", "16"];
    args.extend(FAST);
    let out = rgflow(dir.path(), &args);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let bracket = json(&dir.path().join("bracket.json"));
    assert!(bracket["bracket"].is_null());
    assert!(bracket["warning"].is_string());
}

#[test]
fn unsorted_scan_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = rgflow(dir.path(), &["tc-scan", "--T", "2.3,2.2", "--L0", "16", "--iters", "3"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn magnetization_from_a_flow_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["flow", "--T", "2.0,2.1", "--iters", "5", "--L0", "64"];
    args.extend(FAST);
    assert!(rgflow(dir.path(), &args).status.success());
    let source = format!("{}:row5", dir.path().join("flow.csv").display());
    let mut args = vec!["magnetization", "--source", source.as_str(), "--L", "20", "--svg"];
    args.extend(FAST);
    let out = rgflow(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("magnetization.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "T,m,stderr,onsager");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("2.0,"));
    let m: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!(m > 0.0 && m <= 1.0);
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["results"]["source"]["Renormalized"]["iteration"], 5);

    let bad = format!("{}:row9", dir.path().join("flow.csv").display());
    assert_eq!(rgflow(dir.path(), &["magnetization", "--source", &bad]).status.code(), Some(3));
    assert_eq!(rgflow(dir.path(), &["magnetization", "--source", "flow.csv:fifth"]).status.code(), Some(2));
}

#[test]
fn bare_magnetization_needs_fixed_frame() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["magnetization", "--T", "1.5", "--L", "10", "--boundary", "periodic"];
    args.extend(FAST);
    assert_eq!(rgflow(dir.path(), &args).status.code(), Some(3));
    let mut args = vec!["magnetization", "--T", "1.5", "--L", "10"];
    args.extend(FAST);
    assert!(rgflow(dir.path(), &args).status.success());
    assert_eq!(rgflow(dir.path(), &["magnetization", "--L", "10"]).status.code(), Some(2));
}

#[test]
fn exponents_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["exponents", "--levels", "2,3", "--T", "2.27", "--L0", "32"];
    args.extend(["--sweeps", "200", "--burn-in", "100", "--chains", "2"]);
    let out = rgflow(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let e = json(&dir.path().join("exponents.json"));
    assert_eq!(e["levels"], serde_json::json!([2, 3]));
    assert!(e["result"]["matrix"].as_array().unwrap().len() == 9);
    assert!(e["result"].get("nu").is_some());
    let out = rgflow(dir.path(), &["exponents", "--levels", "2,4", "--L0", "32"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn oracle_fixtures_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = rgflow(d.path(), &["oracle", "--L", "4", "--T", "2.27", "--emit-fixtures"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let x = std::fs::read(a.path().join("fixtures.json")).unwrap();
    assert_eq!(x, std::fs::read(b.path().join("fixtures.json")).unwrap());
    let f: Value = serde_json::from_slice(&x).unwrap();
    assert_eq!(f["size"], 4);
    assert_eq!(f["expectations"].as_array().unwrap().len(), 10);
    assert_eq!(rgflow(a.path(), &["oracle", "--L", "6"]).status.code(), Some(3));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "T = [2.4]\nL0 = 16\niters = 3\nsweeps = 40\nburn_in = 20\nchains = 2\nseed = 11\n").unwrap();
    let out = rgflow(dir.path(), &["flow", "--config", cfg.to_str().unwrap(), "--seed", "12"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["seed"], 12);
    assert_eq!(manifest["config"]["temperatures"], serde_json::json!([2.4]));
    assert_eq!(manifest["config"]["L0"], 16);

    std::fs::write(&cfg, "temperature = 2.4\n").unwrap();
    let out = rgflow(dir.path(), &["flow", "--config", cfg.to_str().unwrap(), "--T", "2.4"]);
    assert_eq!(out.status.code(), Some(3));
}
