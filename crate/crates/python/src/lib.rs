//! Python bindings. Configs travel as JSON strings; results come back as
//! plain dicts and lists.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use lbvae_core::metrics::evaluate_with_sigma_y;
use lbvae_core::objective::Objective;
use lbvae_core::optim::{optimize as run_optimize, OptimizerConfig};
use lbvae_core::select::{grid_from_aggregates, normalize_objectives, select_config, F2Metric, Statistic};
use lbvae_core::stationarity::{Dynamics, FixedPointOptions};
use lbvae_core::sweep::{aggregate, read_records, run_sweep, sample_generative_config, write_records, Procedure, SweepConfig};
use lbvae_core::GenerativeConfig;

fn py_err(e: lbvae_core::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_py(py: Python<'_>, value: serde_json::Value) -> PyResult<Py<PyAny>> {
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (value.to_string(),))?.unbind())
}

fn load_config(config_json: &str) -> PyResult<GenerativeConfig> {
    GenerativeConfig::from_json(config_json).map_err(py_err)
}

/// Draws a generative config and returns it as JSON.
#[pyfunction]
#[pyo3(signature = (seed, n=100, m=10, s=5, sigma_sq=0.05, variance_range=(0.1, 1.0), trial=0))]
fn sample_config(
    seed: u64,
    n: usize,
    m: usize,
    s: usize,
    sigma_sq: f64,
    variance_range: (f64, f64),
    trial: usize,
) -> PyResult<String> {
    sample_generative_config(seed, trial, (n, m, s), variance_range, sigma_sq)
        .and_then(|c| c.to_json())
        .map_err(py_err)
}

/// Fixed-point iteration from a seeded random start (or the trivial
/// solution when `seed` is `None`).
#[pyfunction]
#[pyo3(signature = (config_json, beta, lam=0.0, seed=None, tol=1e-12, max_iter=10_000))]
fn fixed_point(
    py: Python<'_>,
    config_json: &str,
    beta: f64,
    lam: f64,
    seed: Option<u64>,
    tol: f64,
    max_iter: usize,
) -> PyResult<Py<PyAny>> {
    let cfg = load_config(config_json)?;
    let d = Dynamics::new(cfg.clone());
    let init = match seed {
        Some(s) => d.random_init(s, 0.1).map_err(py_err)?,
        None => d.trivial_solution(),
    };
    let opts = FixedPointOptions {
        tol,
        max_iter,
        ..FixedPointOptions::default()
    };
    let run = d
        .run_fixed_point(init, beta, lam, &opts)
        .map_err(|abort| py_err(abort.into()))?;
    let p = &run.state.params;
    let objective = Objective::from_sigma_y(d.sigma_y().clone()).value(p, beta, lam).map_err(py_err)?;
    let metrics = evaluate_with_sigma_y(&cfg, d.sigma_y(), p).map_err(py_err)?;
    to_py(
        py,
        serde_json::json!({
            "converged": run.converged,
            "iterations": run.state.iteration,
            "residual": run.state.residual,
            "collapsed": run.diagnostics.collapsed,
            "trivial_distance": run.diagnostics.trivial_distance,
            "max_sigma_w_spectral_norm": run.diagnostics.sigma_w_spectral_norms.iter().copied().fold(0.0, f64::max),
            "objective": objective,
            "metrics": metrics,
        }),
    )
}

/// AdamW on the closed-form objective.
#[pyfunction]
#[pyo3(signature = (config_json, beta, lam, seed, steps=20_000, learning_rate=1e-3))]
fn optimize(
    py: Python<'_>,
    config_json: &str,
    beta: f64,
    lam: f64,
    seed: u64,
    steps: usize,
    learning_rate: f64,
) -> PyResult<Py<PyAny>> {
    let cfg = load_config(config_json)?;
    let d = Dynamics::new(cfg.clone());
    let opt = OptimizerConfig {
        learning_rate,
        steps,
        seed,
        ..OptimizerConfig::default()
    };
    let init = d.random_init(seed, opt.init_scale).map_err(py_err)?;
    let run = run_optimize(&cfg, beta, lam, &opt, &init).map_err(py_err)?;
    let metrics = evaluate_with_sigma_y(&cfg, d.sigma_y(), &run.params).map_err(py_err)?;
    to_py(
        py,
        serde_json::json!({
            "steps": run.steps,
            "grad_norm": run.grad_norm,
            "objective": run.objective,
            "metrics": metrics,
        }),
    )
}

/// Runs a sweep and returns the records CSV. `sweep_json` may be `None`
/// for the default grid.
#[pyfunction]
#[pyo3(signature = (sweep_json, seed, threads=0))]
fn sweep(py: Python<'_>, sweep_json: Option<&str>, seed: u64, threads: usize) -> PyResult<String> {
    let mut cfg = match sweep_json {
        Some(s) => SweepConfig::from_json(s).map_err(py_err)?,
        None => SweepConfig::default(),
    };
    cfg.master_seed = seed;
    let records = py.detach(|| run_sweep(&cfg, threads)).map_err(py_err)?;
    let mut buf = Vec::new();
    write_records(&records, &mut buf).map_err(py_err)?;
    Ok(String::from_utf8(buf).expect("records are UTF-8"))
}

/// Per-cell summaries of a records CSV.
#[pyfunction]
fn aggregate_records(py: Python<'_>, records_csv: &str) -> PyResult<Py<PyAny>> {
    let records = read_records(records_csv.as_bytes()).map_err(py_err)?;
    let rows = aggregate(&records).map_err(py_err)?;
    to_py(py, serde_json::to_value(rows).expect("serializable"))
}

/// Tchebycheff selection over a records CSV; `w1` weighs reconstruction.
#[pyfunction]
#[pyo3(signature = (records_csv, w1, rho=lbvae_core::select::DEFAULT_RHO, metric="im", procedure="fixed_point"))]
fn select(py: Python<'_>, records_csv: &str, w1: f64, rho: f64, metric: &str, procedure: &str) -> PyResult<Py<PyAny>> {
    let metric = match metric {
        "im" => F2Metric::Im,
        "mig" => F2Metric::Mig,
        other => return Err(PyValueError::new_err(format!("unknown metric {other:?}"))),
    };
    let procedure: Procedure = procedure.parse().map_err(py_err)?;
    let records = read_records(records_csv.as_bytes()).map_err(py_err)?;
    let rows = aggregate(&records).map_err(py_err)?;
    let grid = grid_from_aggregates(&rows, procedure, metric, Statistic::Mean).map_err(py_err)?;
    let sel = select_config(&normalize_objectives(&grid).map_err(py_err)?, (w1, 1.0 - w1), rho).map_err(py_err)?;
    to_py(py, serde_json::to_value(sel).expect("serializable"))
}

#[pymodule]
fn lbvae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sample_config, m)?)?;
    m.add_function(wrap_pyfunction!(fixed_point, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_records, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    Ok(())
}
