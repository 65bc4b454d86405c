//! Experiment specs, CSV artifacts, summaries, determinism and the CLI.

use std::process::Command;

use serde_json::{json, Value};
use vanishlab::harness::{csv_string, emit_csv, emit_json, parse_csv, parse_csv_str, sidecar_path, summarize_rows, Row, CSV_HEADER};
use vanishlab::harness::{self, ExperimentSpec, Kind};
use vanishlab::rng::sub_seed;
use vanishlab::stats;
use vanishlab::{verify, Error};

fn row(observable: &str, trial: usize, value: f64) -> Row {
    Row {
        kind: "chain_scan".into(),
        observable: observable.into(),
        depth: 4,
        width: 1,
        init: "uniform:range=1.7".into(),
        activation: "linear".into(),
        trial,
        sub_seed: 99,
        value,
    }
}

fn spec(kind: Kind, params: Value, trials: usize) -> ExperimentSpec {
    let mut s = ExperimentSpec::new(kind, params).unwrap();
    s.trials = trials;
    s.master_seed = 11;
    s
}

fn chain_spec() -> ExperimentSpec {
    spec(Kind::ChainScan, json!({"depths": [2, 8], "tau": 2.0}), 5)
}

#[test]
fn csv_round_trip_is_exact() {
    let rows = vec![row("a", 0, 1.0 / 3.0), row("b", 1, -7.25e-310), row("c", 2, f64::NAN), row("d", 3, 1e300)];
    let text = csv_string(&rows).unwrap();
    assert!(text.starts_with(&(CSV_HEADER.join(",") + "\n")));
    let back = parse_csv_str(&text).unwrap();
    assert_eq!(back.len(), rows.len());
    for (a, b) in back.iter().zip(&rows) {
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!((&a.observable, a.trial), (&b.observable, b.trial));
    }
}

#[test]
fn empty_rows_are_refused_without_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    assert!(matches!(emit_csv(&[], &path), Err(Error::InvalidArgument(_))));
    assert!(matches!(emit_json(&[], &path), Err(Error::InvalidArgument(_))));
    assert!(!path.exists());
}

#[test]
fn io_errors_name_the_path() {
    let err = emit_csv(&[row("a", 0, 1.0)], std::path::Path::new("/nonexistent-dir/x.csv")).unwrap_err();
    assert!(matches!(&err, Error::Io(m) if m.contains("/nonexistent-dir/x.csv")));
}

#[test]
fn summary_vectors() {
    let one = stats::summarize(&[4.5]).unwrap();
    assert_eq!((one.n, one.mean, one.median, one.std, one.ci95_low, one.ci95_high), (1, 4.5, 4.5, 0.0, 4.5, 4.5));
    let c = stats::summarize(&[2.0; 10]).unwrap();
    assert_eq!((c.ci95_low, c.ci95_high), (2.0, 2.0));
    let s = stats::summarize(&[1.0, 2.0, 3.0]).unwrap();
    assert_eq!((s.mean, s.median), (2.0, 2.0));
    assert!(s.ci95_low <= s.mean && s.mean <= s.ci95_high);
    let d = stats::summarize(&[1.0, f64::INFINITY, 3.0]).unwrap();
    assert_eq!((d.n, d.dropped, d.mean), (2, 1, 2.0));
    assert!(stats::summarize(&[]).is_err());
}

#[test]
fn summaries_report_raw_and_log_magnitude() {
    let rows = vec![row("g", 0, -1e-8), row("g", 1, 1e-6), row("g", 2, 1e-4)];
    let s = summarize_rows(&rows);
    assert_eq!(s.len(), 1);
    let log = s[0].log_abs.unwrap();
    assert!((log.median - (1e-6f64).ln()).abs() < 1e-12);
    assert_eq!(s[0].raw.unwrap().n, 3);
}

#[test]
fn bootstrap_interval_has_nominal_coverage() {
    let r = verify::bootstrap_coverage(7).unwrap();
    assert!(r.passed, "{}", r.line());
}

#[test]
fn scans_are_deterministic_across_thread_counts() {
    let s = chain_spec();
    let a = harness::run(&s, Some(1)).unwrap();
    let b = harness::run(&s, Some(3)).unwrap();
    assert_eq!(csv_string(&a.rows).unwrap(), csv_string(&b.rows).unwrap());
    assert!(!a.rows.is_empty());
    assert!(a.rows.iter().all(|r| !r.observable.starts_with("error")));
}

#[test]
fn rows_carry_their_sub_seed() {
    let s = chain_spec();
    let out = harness::run(&s, Some(2)).unwrap();
    for r in &out.rows {
        let i = if r.depth == 2 { 0 } else { 1 };
        assert_eq!(r.sub_seed, sub_seed(s.master_seed, (i * s.trials + r.trial) as u64));
    }
    let mut single = s.clone();
    single.trials = 1;
    let one = harness::run(&single, Some(1)).unwrap();
    let first: Vec<&Row> = out.rows.iter().filter(|r| r.depth == 2 && r.trial == 0).collect();
    let again: Vec<&Row> = one.rows.iter().filter(|r| r.depth == 2).collect();
    assert_eq!(first, again);
}

#[test]
fn execute_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scan.csv");
    let mut s = chain_spec();
    s.output = Some(path.clone());
    let out = harness::execute(&s, None).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, csv_string(&out.rows).unwrap());
    assert_eq!(parse_csv(&path).unwrap().len(), out.rows.len());
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
    assert_eq!(meta["spec_sha256"], s.hash());
    assert_eq!(meta["spec"], s.to_json());
    assert!(meta["ci_method"].as_str().unwrap().contains("bootstrap"));
    assert!(meta["version"].is_string());
}

#[test]
fn validation_reports_every_problem_before_work() {
    let s = spec(Kind::MlpScan, json!({"depths": "four", "bogus": 1}), 0);
    let err = harness::run(&s, None).unwrap_err();
    let Error::Config(msg) = err else { panic!("expected a config error") };
    for needle in ["trials", "depths", "width_rule", "init", "activation", "bogus"] {
        assert!(msg.contains(needle), "{needle} missing from {msg}");
    }
    assert!(ExperimentSpec::from_json(r#"{"kind": "chain_scan", "extra": 1}"#).is_err());
    assert!(ExperimentSpec::new(Kind::ChainScan, json!([1, 2])).is_err());
}

#[test]
fn empty_chain_data_fails_validation() {
    let s = spec(Kind::ChainScan, json!({"depths": [3], "tau": 2.0, "data": []}), 2);
    assert!(matches!(harness::run(&s, Some(1)), Err(Error::Config(_))));
}

#[test]
fn unit_failures_become_error_rows() {
    let params = json!({"depths": [2, 3], "spatial": {"shape": "grid", "r": 3}, "padding": "zero", "input": "/nonexistent-dir/images.bin"});
    let out = harness::run(&spec(Kind::ConvScan, params, 2), Some(1)).unwrap();
    assert_eq!(out.rows.len(), 4);
    assert!(out.rows.iter().all(|r| r.observable == "error:io" && r.value.is_nan()));
}

#[test]
fn predict_kind_returns_a_document() {
    let s = spec(Kind::Predict, json!({"depth": 3, "tau": 2.0, "w0": 0.5}), 1);
    let out = harness::run(&s, None).unwrap();
    let doc = out.prediction.unwrap();
    assert_eq!(doc["chain"]["moments"][0].as_f64().unwrap(), 1.0);
    assert_eq!(doc["flow"]["t_e"].as_f64().unwrap(), 2.0);
    assert!(out.rows.is_empty());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vanishlab"))
}

#[test]
fn cli_predict_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("p.json");
    std::fs::write(&cfg, r#"{"kind": "predict", "params": {"depth": 2, "alpha": 0.5}}"#).unwrap();
    let out = cli().args(["predict", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["depth"], 2);
    assert!(v["min_width_for_median"].as_u64().is_some());
}

#[test]
fn cli_scan_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, serde_json::to_string(&chain_spec().to_json()).unwrap()).unwrap();
    let run = |threads: &str| {
        let out = cli().args(["chain", "--seed", "5", "--trials", "3", "--threads", threads, "--config"]).arg(&cfg).output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        out.stdout
    };
    let a = run("1");
    assert_eq!(a, run("2"));
    let rows = parse_csv_str(std::str::from_utf8(&a).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.trial < 3));

    let path = dir.path().join("o.csv");
    let out = cli().args(["chain", "--seed", "5", "--trials", "3", "--config"]).arg(&cfg).arg("--out").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(&path).unwrap(), a);
    assert!(sidecar_path(&path).exists());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, serde_json::to_string(&chain_spec().to_json()).unwrap()).unwrap();
    let out = cli().args(["mlp", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error [config]"));

    let out = cli().args(["chain"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let ok = dir.path().join("v.json");
    std::fs::write(&ok, r#"{"kind": "verify", "params": {"checks": ["flow_bound", "chain_mean"]}}"#).unwrap();
    let out = cli().args(["verify", "--config"]).arg(&ok).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS flow_bound"));

    let bad = dir.path().join("b.json");
    std::fs::write(&bad, r#"{"kind": "verify", "params": {"checks": ["no_such_check"]}}"#).unwrap();
    let out = cli().args(["verify", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
