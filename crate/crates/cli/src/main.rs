//! `lbvae`: configs, single runs, sweeps, selection and self-checks for the
//! linear Gaussian β-VAE / λβ-VAE.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 verification
//! failure.

mod manifest;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lbvae_core::metrics::{evaluate_with_sigma_y, MetricReport};
use lbvae_core::objective::{Objective, ObjectiveBreakdown};
use lbvae_core::optim::{optimize, write_objective_trace_csv, OptimizerConfig};
use lbvae_core::select::{
    grid_from_aggregates, normalize_objectives, pareto_front, render_heatmap_svg, select_config, write_ranked_csv,
    F2Metric, Statistic,
};
use lbvae_core::stationarity::{write_trace_csv, Dynamics, FixedPointAbort, FixedPointOptions};
use lbvae_core::sweep::{aggregate, run_sweep, sample_generative_config, write_records, AggregateRow, Procedure, SweepConfig};
use lbvae_core::GenerativeConfig;

use manifest::RunManifest;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    Verification(String),
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl From<lbvae_core::Error> for CliError {
    fn from(e: lbvae_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<FixedPointAbort> for CliError {
    fn from(abort: FixedPointAbort) -> Self {
        let msg = abort.to_string();
        match lbvae_core::Error::from(abort).is_numerical() {
            true => CliError::Numerical(msg),
            false => CliError::Usage(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "lbvae", version, about = "Linear Gaussian β-VAE / λβ-VAE toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generative or sweep config as JSON.
    GenConfig(GenConfigArgs),
    /// Iterate the stationarity map from one initialization.
    FixedPoint(FixedPointArgs),
    /// Minimize the closed-form objective with AdamW.
    Optimize(OptimizeArgs),
    /// Run a (β, λ) sweep; writes records CSV and aggregate JSON.
    Sweep(SweepArgs),
    /// Pick a (β, λ) cell from sweep aggregates by Tchebycheff scalarization.
    Select(SelectArgs),
    /// Run the invariant suite; exits 3 on any violation.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigKind {
    Generative,
    Sweep,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitKind {
    Random,
    Trivial,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProcedureArg {
    FixedPoint,
    Optimize,
}

impl From<ProcedureArg> for Procedure {
    fn from(p: ProcedureArg) -> Self {
        match p {
            ProcedureArg::FixedPoint => Procedure::FixedPoint,
            ProcedureArg::Optimize => Procedure::Optimize,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Im,
    Mig,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatArg {
    Mean,
    Median,
}

#[derive(Args)]
struct GenConfigArgs {
    #[arg(long, value_enum, default_value = "generative")]
    kind: ConfigKind,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 5)]
    s: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma_sq: f64,
    /// Range of the factor variances, as LOW,HIGH.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.1, 1.0])]
    variance_range: Vec<f64>,
    /// Config draw seed (generative) or master seed (sweep).
    #[arg(long)]
    seed: u64,
    /// Trial index of the generative draw.
    #[arg(long, default_value_t = 0)]
    trial: usize,
    #[arg(long, value_delimiter = ',')]
    beta_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    procedures: Option<Vec<ProcedureArg>>,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixedPointArgs {
    /// Generative config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    beta: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    collapse_threshold: f64,
    /// Required with `--init random`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "random")]
    init: InitKind,
    #[arg(long, default_value_t = 0.1)]
    init_scale: f64,
    /// Per-iteration trajectory CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Report JSON (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    beta: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    init_scale: f64,
    /// Objective trace CSV, one row per 100 steps.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep config JSON; defaults to the built-in protocol.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Rerun the sweep recorded in a manifest sidecar.
    #[arg(long, conflicts_with = "seed")]
    manifest: Option<PathBuf>,
    /// Master seed; overrides the config's `master_seed`.
    #[arg(long, required_unless_present = "manifest")]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Records CSV.
    #[arg(long)]
    out: PathBuf,
    /// Aggregate JSON; defaults to the records path with `.aggregate.json`.
    #[arg(long)]
    aggregate: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    /// Aggregate JSON written by `sweep`.
    #[arg(long)]
    aggregate: PathBuf,
    /// Weight on reconstruction; disentanglement gets 1 − w1.
    #[arg(long)]
    w1: f64,
    #[arg(long, default_value_t = lbvae_core::select::DEFAULT_RHO)]
    rho: f64,
    #[arg(long, value_enum, default_value = "im")]
    metric: MetricArg,
    #[arg(long, value_enum, default_value = "mean")]
    stat: StatArg,
    #[arg(long, value_enum, default_value = "fixed-point")]
    procedure: ProcedureArg,
    /// Ranked CSV.
    #[arg(long)]
    out: PathBuf,
    /// SVG heatmap; defaults to the ranked path with `.svg`.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Generative config JSON; drawn from `--seed` and the size flags when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 5)]
    s: usize,
    #[arg(long, default_value_t = 100_000)]
    mc_samples: usize,
    #[arg(long, default_value_t = 400)]
    gradient_coords: usize,
    #[arg(long, default_value_t = 100)]
    matching_instances: usize,
    /// Check results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenConfig(a) => gen_config(a),
        Command::FixedPoint(a) => fixed_point(a),
        Command::Optimize(a) => optimize_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Select(a) => select(a),
        Command::Verify(a) => verify_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Numerical(m) => eprintln!("numerical failure: {m}"),
                CliError::Verification(m) => eprintln!("verification failed: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn to_value<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("serializable")
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_generative(path: &Path) -> Result<GenerativeConfig, CliError> {
    GenerativeConfig::from_json(&read(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn emit(manifest: &mut RunManifest, out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => manifest.write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_config(a: GenConfigArgs) -> Result<(), CliError> {
    let range = (a.variance_range[0], a.variance_range[1]);
    let (text, mut manifest) = match a.kind {
        ConfigKind::Generative => {
            let cfg = sample_generative_config(a.seed, a.trial, (a.n, a.m, a.s), range, a.sigma_sq)?;
            let manifest = RunManifest::new(
                "gen-config",
                serde_json::json!({ "kind": "generative", "n": a.n, "m": a.m, "s": a.s,
                    "sigma_sq": a.sigma_sq, "variance_range": range, "trial": a.trial }),
                Some(a.seed),
            );
            (cfg.to_json()? + "\n", manifest)
        }
        ConfigKind::Sweep => {
            let mut cfg = SweepConfig {
                n: a.n,
                m: a.m,
                s: a.s,
                variance_range: range,
                sigma_sq: a.sigma_sq,
                master_seed: a.seed,
                ..SweepConfig::default()
            };
            if let Some(g) = a.beta_grid {
                cfg.beta_grid = g;
            }
            if let Some(g) = a.lambda_grid {
                cfg.lambda_grid = g;
            }
            if let Some(t) = a.trials {
                cfg.trials = t;
            }
            if let Some(p) = a.procedures {
                cfg.procedures = p.into_iter().map(Procedure::from).collect();
            }
            cfg.validate()?;
            let manifest = RunManifest::new("gen-config", to_value(&cfg), Some(a.seed));
            (cfg.to_json()? + "\n", manifest)
        }
    };
    emit(&mut manifest, a.out.as_deref(), &text)?;
    manifest.finish()
}

#[derive(Serialize)]
struct FixedPointReport {
    beta: f64,
    lambda: f64,
    init: &'static str,
    converged: bool,
    iterations: usize,
    residual: f64,
    collapsed: bool,
    trivial_distance: f64,
    max_sigma_w_spectral_norm: f64,
    max_gain_recursion_error: Option<f64>,
    objective: ObjectiveBreakdown,
    metrics: MetricReport,
}

fn fixed_point(a: FixedPointArgs) -> Result<(), CliError> {
    let cfg = load_generative(&a.config)?;
    let dynamics = Dynamics::new(cfg.clone());
    let (init, init_name) = match a.init {
        InitKind::Trivial => (dynamics.trivial_solution(), "trivial"),
        InitKind::Random => {
            let seed = a
                .seed
                .ok_or_else(|| CliError::Usage("--seed is required with --init random".into()))?;
            (dynamics.random_init(seed, a.init_scale)?, "random")
        }
    };
    let opts = FixedPointOptions {
        tol: a.tol,
        max_iter: a.max_iter,
        collapse_threshold: a.collapse_threshold,
        trace: a.trace.is_some(),
        ..FixedPointOptions::default()
    };
    let run = dynamics.run_fixed_point(init, a.beta, a.lambda, &opts)?;
    let params = &run.state.params;
    let report = FixedPointReport {
        beta: a.beta,
        lambda: a.lambda,
        init: init_name,
        converged: run.converged,
        iterations: run.state.iteration,
        residual: run.state.residual,
        collapsed: run.diagnostics.collapsed,
        trivial_distance: run.diagnostics.trivial_distance,
        max_sigma_w_spectral_norm: run.diagnostics.sigma_w_spectral_norms.iter().copied().fold(0.0, f64::max),
        max_gain_recursion_error: run
            .diagnostics
            .gain_recursion_residuals
            .iter()
            .map(|g| g.rel_error)
            .reduce(f64::max),
        objective: Objective::from_sigma_y(dynamics.sigma_y().clone()).value(params, a.beta, a.lambda)?,
        metrics: evaluate_with_sigma_y(&cfg, dynamics.sigma_y(), params)?,
    };
    let mut manifest = RunManifest::new(
        "fixed-point",
        serde_json::json!({ "config": to_value(&cfg), "beta": a.beta, "lambda": a.lambda, "tol": a.tol,
            "max_iter": a.max_iter, "collapse_threshold": a.collapse_threshold, "init": init_name,
            "init_scale": a.init_scale }),
        a.seed,
    );
    if let Some(path) = &a.trace {
        let mut buf = Vec::new();
        write_trace_csv(&run.trace, &mut buf)?;
        manifest.write(path, buf)?;
    }
    let text = to_json(&report);
    print!("{text}");
    if let Some(path) = &a.out {
        manifest.write(path, &text)?;
    }
    manifest.finish()
}

#[derive(Serialize)]
struct OptimizeReport {
    beta: f64,
    lambda: f64,
    steps: usize,
    grad_norm: f64,
    collapsed: bool,
    trivial_distance: f64,
    objective: ObjectiveBreakdown,
    metrics: MetricReport,
}

fn optimize_cmd(a: OptimizeArgs) -> Result<(), CliError> {
    let cfg = load_generative(&a.config)?;
    let dynamics = Dynamics::new(cfg.clone());
    let opt = OptimizerConfig {
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        steps: a.steps,
        seed: a.seed,
        init_scale: a.init_scale,
        ..OptimizerConfig::default()
    };
    opt.validate()?;
    let init = dynamics.random_init(a.seed, a.init_scale)?;
    let run = optimize(&cfg, a.beta, a.lambda, &opt, &init)?;
    let collapse = dynamics.detect_collapse(&run.params, 1e-6);
    let report = OptimizeReport {
        beta: a.beta,
        lambda: a.lambda,
        steps: run.steps,
        grad_norm: run.grad_norm,
        collapsed: collapse.collapsed,
        trivial_distance: collapse.trivial_distance,
        objective: run.objective,
        metrics: evaluate_with_sigma_y(&cfg, dynamics.sigma_y(), &run.params)?,
    };
    let mut manifest = RunManifest::new(
        "optimize",
        serde_json::json!({ "config": to_value(&cfg), "beta": a.beta, "lambda": a.lambda, "optimizer": to_value(&opt) }),
        Some(a.seed),
    );
    if let Some(path) = &a.trace {
        let mut buf = Vec::new();
        write_objective_trace_csv(&run.trace, &mut buf)?;
        manifest.write(path, buf)?;
    }
    let text = to_json(&report);
    print!("{text}");
    if let Some(path) = &a.out {
        manifest.write(path, &text)?;
    }
    manifest.finish()
}

fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let cfg = if let Some(path) = &a.manifest {
        let m = RunManifest::load(path)?;
        if m.command != "sweep" {
            return Err(CliError::Usage(format!("{}: manifest is for `{}`, not `sweep`", path.display(), m.command)));
        }
        let cfg: SweepConfig = serde_json::from_value(m.config)
            .map_err(|e| CliError::Usage(format!("{}: bad sweep config: {e}", path.display())))?;
        cfg.validate()?;
        cfg
    } else {
        let mut cfg = match &a.config {
            Some(path) => SweepConfig::from_json(&read(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
            None => SweepConfig::default(),
        };
        cfg.master_seed = a.seed.expect("clap enforces --seed without --manifest");
        cfg
    };
    let start = Instant::now();
    let records = run_sweep(&cfg, a.threads)?;
    let rows = aggregate(&records)?;
    let mut manifest = RunManifest::new("sweep", to_value(&cfg), Some(cfg.master_seed));
    let mut buf = Vec::new();
    write_records(&records, &mut buf)?;
    manifest.write(&a.out, buf)?;
    let agg_path = a.aggregate.unwrap_or_else(|| a.out.with_extension("aggregate.json"));
    manifest.write(&agg_path, to_json(&rows))?;
    manifest.finish()?;
    let converged = records.iter().filter(|r| r.converged).count();
    eprintln!(
        "{} records ({converged} converged) in {:.1} s; wrote {} and {}",
        records.len(),
        start.elapsed().as_secs_f64(),
        a.out.display(),
        agg_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SelectReport {
    beta: f64,
    lambda: f64,
    weights: (f64, f64),
    rho: f64,
    metric: F2Metric,
    score: f64,
    pareto_front: Vec<(f64, f64)>,
    flags: Vec<String>,
}

fn select(a: SelectArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.w1) {
        return Err(CliError::Usage(format!("--w1 must lie in [0, 1], got {}", a.w1)));
    }
    let rows: Vec<AggregateRow> = serde_json::from_str(&read(&a.aggregate)?)
        .map_err(|e| CliError::Usage(format!("{}: not a sweep aggregate: {e}", a.aggregate.display())))?;
    let metric = match a.metric {
        MetricArg::Im => F2Metric::Im,
        MetricArg::Mig => F2Metric::Mig,
    };
    let stat = match a.stat {
        StatArg::Mean => Statistic::Mean,
        StatArg::Median => Statistic::Median,
    };
    let grid = grid_from_aggregates(&rows, a.procedure.into(), metric, stat)?;
    let sel = select_config(&normalize_objectives(&grid)?, (a.w1, 1.0 - a.w1), a.rho)?;
    let front = pareto_front(&grid)?;

    let mut manifest = RunManifest::new(
        "select",
        serde_json::json!({ "aggregate": a.aggregate, "w1": a.w1, "rho": a.rho, "metric": metric,
            "stat": stat, "procedure": Procedure::from(a.procedure) }),
        None,
    );
    let mut buf = Vec::new();
    write_ranked_csv(&sel, &mut buf)?;
    manifest.write(&a.out, buf)?;
    let svg_path = a.svg.unwrap_or_else(|| a.out.with_extension("svg"));
    let title = format!("Tchebycheff score, w = ({}, {})", a.w1, 1.0 - a.w1);
    manifest.write(&svg_path, render_heatmap_svg(&sel, &title))?;
    manifest.finish()?;

    let report = SelectReport {
        beta: sel.beta,
        lambda: sel.lambda,
        weights: sel.weights,
        rho: sel.rho,
        metric,
        score: sel.ranked[0].score,
        pareto_front: front.iter().map(|c| (c.beta, c.lambda)).collect(),
        flags: sel.flags.iter().map(|f| f.to_string()).collect(),
    };
    print!("{}", to_json(&report));
    Ok(())
}

fn verify_cmd(a: VerifyArgs) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(path) => load_generative(path)?,
        None => sample_generative_config(a.seed, 0, (a.n, a.m, a.s), (0.1, 1.0), 0.05)?,
    };
    let opts = verify::VerifyOptions {
        seed: a.seed,
        mc_samples: a.mc_samples,
        gradient_coords: a.gradient_coords,
        matching_instances: a.matching_instances,
    };
    let checks = verify::run(&cfg, &opts)?;
    for c in &checks {
        println!("{} {:<15} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(path) = &a.out {
        let mut manifest = RunManifest::new(
            "verify",
            serde_json::json!({ "config": to_value(&cfg), "mc_samples": a.mc_samples,
                "gradient_coords": a.gradient_coords, "matching_instances": a.matching_instances }),
            Some(a.seed),
        );
        manifest.write(path, to_json(&checks))?;
        manifest.finish()?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
