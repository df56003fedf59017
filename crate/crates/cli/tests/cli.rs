use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lbvae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbvae"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn gen_default(dir: &Path) {
    assert_eq!(code(&lbvae(dir, &["gen-config", "--seed", "1", "--out", "cfg.json"])), 0);
}

#[test]
fn gen_config_defaults_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    gen_default(dir.path());
    let cfg = read_json(&dir.path().join("cfg.json"));
    assert_eq!(cfg["n"], 100);
    assert_eq!(cfg["m"], 10);
    assert_eq!(cfg["s"], 5);
    assert_eq!(cfg["sigma_sq"], 0.05);
    for v in cfg["sigma_v_diag"].as_array().unwrap() {
        let v = v.as_f64().unwrap();
        assert!((0.1..=1.0).contains(&v));
    }
    let manifest = read_json(&dir.path().join("cfg.json.manifest.json"));
    assert_eq!(manifest["command"], "gen-config");
    assert_eq!(manifest["master_seed"], 1);
    assert_eq!(manifest["outputs"][0], "cfg.json");
    assert!(manifest["tool_version"].is_string() && manifest["timestamp"].is_u64());
}

#[test]
fn gen_config_minimal_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json(&lbvae(dir.path(), &["gen-config", "--n", "2", "--m", "1", "--s", "1", "--seed", "0"]));
    assert_eq!((cfg["n"].as_u64(), cfg["m"].as_u64(), cfg["s"].as_u64()), (Some(2), Some(1), Some(1)));

    let bad = lbvae(dir.path(), &["gen-config", "--sigma-sq", "0", "--seed", "0"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("noise variance must be positive"));

    let no_seed = lbvae(dir.path(), &["gen-config"]);
    assert_eq!(code(&no_seed), 1);
    assert!(String::from_utf8_lossy(&no_seed.stderr).contains("--seed"));

    assert_eq!(code(&lbvae(dir.path(), &["gen-config", "--seed", "0", "--variance-range", "1,0.1"])), 1);
    assert_eq!(code(&lbvae(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&lbvae(dir.path(), &["--help"])), 0);
}

#[test]
fn fixed_point_collapse_and_restoration() {
    let dir = tempfile::tempdir().unwrap();
    gen_default(dir.path());
    let args = |lambda: &'static str| ["fixed-point", "--config", "cfg.json", "--beta", "4", "--lambda", lambda, "--seed", "3"];
    let collapsed = json(&lbvae(dir.path(), &args("0")));
    assert_eq!(collapsed["converged"], true);
    assert_eq!(collapsed["collapsed"], true);
    assert!(collapsed["metrics"]["sap"].as_f64().unwrap() <= 1e-3);
    assert!(collapsed["max_sigma_w_spectral_norm"].as_f64().unwrap() <= 1.0 + 1e-12);

    let restored = json(&lbvae(dir.path(), &args("8")));
    assert_eq!(restored["collapsed"], false);
    assert!(restored["metrics"]["im"].as_f64().unwrap() > 0.1);
}

#[test]
fn fixed_point_from_trivial_init_is_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    gen_default(dir.path());
    let report = json(&lbvae(
        dir.path(),
        &["fixed-point", "--config", "cfg.json", "--beta", "1", "--max-iter", "1", "--init", "trivial"],
    ));
    assert_eq!(report["iterations"], 1);
    assert_eq!(report["residual"], 0.0);
    assert_eq!(report["trivial_distance"], 0.0);
    assert_eq!(report["metrics"]["im"], 0.0);
}

#[test]
fn fixed_point_usage_and_numerical_errors() {
    let dir = tempfile::tempdir().unwrap();
    gen_default(dir.path());
    // Random init without a seed.
    assert_eq!(code(&lbvae(dir.path(), &["fixed-point", "--config", "cfg.json", "--beta", "4"])), 1);
    assert_eq!(code(&lbvae(dir.path(), &["fixed-point", "--config", "missing.json", "--beta", "4", "--seed", "0"])), 1);
    // β < 1 drives Σ_Z singular within a few dozen iterations.
    let diverged = lbvae(dir.path(), &["fixed-point", "--config", "cfg.json", "--beta", "0.5", "--seed", "1"]);
    assert_eq!(code(&diverged), 2);
    assert!(String::from_utf8_lossy(&diverged.stderr).contains("not positive definite"));
}

#[test]
fn fixed_point_trace_and_report_files() {
    let dir = tempfile::tempdir().unwrap();
    gen_default(dir.path());
    let out = lbvae(
        dir.path(),
        &["fixed-point", "--config", "cfg.json", "--beta", "2", "--seed", "0", "--trace", "t.csv", "--out", "r.json"],
    );
    let report = json(&out);
    assert_eq!(read_json(&dir.path().join("r.json")), report);
    let trace = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert!(lines[0].starts_with("iteration,"));
    assert_eq!(lines.len() as u64, report["iterations"].as_u64().unwrap() + 1);
    let manifest = read_json(&dir.path().join("t.csv.manifest.json"));
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest, read_json(&dir.path().join("r.json.manifest.json")));
}

#[test]
fn optimize_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    lbvae(d, &["gen-config", "--n", "8", "--m", "3", "--s", "2", "--seed", "2", "--out", "cfg.json"]);
    let args = ["optimize", "--config", "cfg.json", "--beta", "2", "--steps", "300", "--seed", "1", "--trace", "o.csv"];
    let report = json(&lbvae(d, &args));
    assert_eq!(report["steps"], 300);
    let trace = std::fs::read_to_string(d.join("o.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);
    // Same seed, same bytes.
    assert_eq!(json(&lbvae(d, &args)), report);
    assert_eq!(code(&lbvae(d, &["optimize", "--config", "cfg.json", "--beta", "2"])), 1);
}

fn write_small_sweep(dir: &Path) {
    let cfg = serde_json::json!({
        "n": 10, "m": 3, "s": 2,
        "beta_grid": [2.0, 4.0, 8.0], "lambda_grid": [0.0, 8.0],
        "trials": 2, "procedures": ["fixed_point", "optimize"],
        "optimizer": { "steps": 200 }
    });
    std::fs::write(dir.join("sweep.json"), cfg.to_string()).unwrap();
}

#[test]
fn sweep_is_deterministic_across_threads_and_manifest_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_small_sweep(d);
    let run = |threads: &str, out: &str| {
        let o = lbvae(d, &["sweep", "--config", "sweep.json", "--seed", "11", "--threads", threads, "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(d.join(out)).unwrap()
    };
    let one = run("1", "a.csv");
    assert_eq!(one, run("3", "b.csv"));
    assert_eq!(String::from_utf8_lossy(&one).lines().count(), 1 + 3 * 2 * 2 * 2);

    let rerun = lbvae(d, &["sweep", "--manifest", "a.csv.manifest.json", "--threads", "2", "--out", "c.csv"]);
    assert_eq!(code(&rerun), 0);
    assert_eq!(one, std::fs::read(d.join("c.csv")).unwrap());

    let agg = read_json(&d.join("a.aggregate.json"));
    assert_eq!(agg.as_array().unwrap().len(), 3 * 2 * 2);
    assert_eq!(read_json(&d.join("a.csv.manifest.json"))["config"]["master_seed"], 11);

    assert_eq!(code(&lbvae(d, &["sweep", "--config", "sweep.json", "--out", "x.csv"])), 1);
    assert_eq!(
        code(&lbvae(d, &["sweep", "--manifest", "sweep.json", "--out", "x.csv"])),
        1,
        "a config file is not a manifest"
    );
}

#[test]
fn select_weights_move_the_choice_toward_larger_beta() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_small_sweep(d);
    assert_eq!(code(&lbvae(d, &["sweep", "--config", "sweep.json", "--seed", "4", "--out", "s.csv"])), 0);
    let pick = |w1: &str| json(&lbvae(d, &["select", "--aggregate", "s.aggregate.json", "--w1", w1, "--out", "r.csv"]));
    let fidelity = pick("1.0");
    let disentangle = pick("0.0");
    assert!(fidelity["beta"].as_f64() <= disentangle["beta"].as_f64());
    for sel in [&fidelity, &disentangle] {
        let cell = (sel["beta"].as_f64().unwrap(), sel["lambda"].as_f64().unwrap());
        let front: Vec<(f64, f64)> = serde_json::from_value(sel["pareto_front"].clone()).unwrap();
        assert!(front.contains(&cell));
    }
    let ranked = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(ranked.starts_with("rank,beta,lambda"));
    assert!(std::fs::read_to_string(d.join("r.svg")).unwrap().starts_with("<svg"));
    assert!(d.join("r.svg.manifest.json").exists());

    let optimize = json(&lbvae(
        d,
        &["select", "--aggregate", "s.aggregate.json", "--w1", "0.5", "--procedure", "optimize", "--out", "o.csv"],
    ));
    assert!(optimize["beta"].is_f64());

    assert_eq!(code(&lbvae(d, &["select", "--aggregate", "s.csv", "--w1", "0.5", "--out", "x.csv"])), 1);
    assert_eq!(code(&lbvae(d, &["select", "--aggregate", "s.aggregate.json", "--w1", "1.5", "--out", "x.csv"])), 1);
}

#[test]
fn verify_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = lbvae(dir.path(), &["verify", "--seed", "0", "--out", "v.json"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5);
    let checks = read_json(&dir.path().join("v.json"));
    let names: Vec<&str> = checks.as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["spectral_bound", "gain_recursion", "gradient", "monte_carlo", "matching"]);
    assert_eq!(code(&lbvae(dir.path(), &["verify"])), 1);
}
