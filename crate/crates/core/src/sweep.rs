//! Seeded (β, λ) grid sweeps over both procedures, CSV persistence and
//! per-cell aggregation.
//!
//! Every trial draws its own generative config from `(master_seed, trial)`;
//! the initialization seed of a cell is derived from
//! `(master_seed, β index, λ index, trial, procedure)`. Results therefore do
//! not depend on the worker count or scheduling.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GenerativeConfig, ModelParams};
use crate::metrics::evaluate_with_sigma_y;
use crate::objective::{Objective, ObjectiveBreakdown};
use crate::optim::{optimize, OptimizerConfig};
use crate::seed::{derive_seed, rng};
use crate::stationarity::{Dynamics, FixedPointOptions};

/// Seed-derivation tag for config draws, distinct from any grid index.
const CONFIG_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    FixedPoint,
    Optimize,
}

impl Procedure {
    pub fn as_str(self) -> &'static str {
        match self {
            Procedure::FixedPoint => "fixed_point",
            Procedure::Optimize => "optimize",
        }
    }

    fn index(self) -> u64 {
        match self {
            Procedure::FixedPoint => 0,
            Procedure::Optimize => 1,
        }
    }
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Procedure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_point" => Ok(Procedure::FixedPoint),
            "optimize" => Ok(Procedure::Optimize),
            other => Err(Error::Config(format!("unknown procedure {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub collapse_threshold: f64,
}

impl Default for FixedPointSettings {
    fn default() -> Self {
        let d = FixedPointOptions::default();
        Self {
            tol: d.tol,
            max_iter: d.max_iter,
            collapse_threshold: d.collapse_threshold,
        }
    }
}

impl FixedPointSettings {
    pub fn options(&self) -> FixedPointOptions {
        FixedPointOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            collapse_threshold: self.collapse_threshold,
            ..FixedPointOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n: usize,
    pub m: usize,
    pub s: usize,
    /// Range of the factor variances (diagonal of Σ_V).
    pub variance_range: (f64, f64),
    pub sigma_sq: f64,
    pub beta_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub trials: usize,
    pub procedures: Vec<Procedure>,
    pub master_seed: u64,
    pub init_scale: f64,
    pub fixed_point: FixedPointSettings,
    /// `seed` is ignored; each cell derives its own.
    pub optimizer: OptimizerConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n: 100,
            m: 10,
            s: 5,
            variance_range: (0.1, 1.0),
            sigma_sq: 0.05,
            beta_grid: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            lambda_grid: vec![0.0, 4.0, 8.0, 16.0, 32.0],
            trials: 50,
            procedures: vec![Procedure::FixedPoint],
            master_seed: 0,
            init_scale: 0.1,
            fixed_point: FixedPointSettings::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n == 0 || self.m == 0 || self.s == 0 {
            return bad(format!("dimensions must be positive, got n={} m={} s={}", self.n, self.m, self.s));
        }
        check_range(self.variance_range)?;
        if !(self.sigma_sq > 0.0 && self.sigma_sq.is_finite()) {
            return bad(format!("sigma_sq must be positive, got {}", self.sigma_sq));
        }
        if self.beta_grid.is_empty() || !strictly_increasing(&self.beta_grid) {
            return bad("beta_grid must be non-empty and strictly increasing".into());
        }
        if self.beta_grid.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return bad("beta_grid entries must be positive".into());
        }
        if self.lambda_grid.is_empty() || !strictly_increasing(&self.lambda_grid) {
            return bad("lambda_grid must be non-empty and strictly increasing".into());
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("lambda_grid entries must be nonnegative".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        let mut procs = self.procedures.clone();
        procs.sort();
        procs.dedup();
        if procs.is_empty() || procs.len() != self.procedures.len() {
            return bad("procedures must be a non-empty set".into());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be positive, got {}", self.init_scale));
        }
        if !(self.fixed_point.tol > 0.0) || self.fixed_point.max_iter == 0 {
            return bad("fixed_point.tol must be positive and max_iter at least 1".into());
        }
        self.optimizer.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Number of records a sweep produces.
    pub fn cell_count(&self) -> usize {
        self.beta_grid.len() * self.lambda_grid.len() * self.trials * self.procedures.len()
    }

    fn sorted_procedures(&self) -> Vec<Procedure> {
        let mut p = self.procedures.clone();
        p.sort();
        p
    }

    pub fn generative_config(&self, trial: usize) -> Result<GenerativeConfig> {
        sample_generative_config(
            self.master_seed,
            trial,
            (self.n, self.m, self.s),
            self.variance_range,
            self.sigma_sq,
        )
    }

    /// Initialization seed of one cell.
    pub fn cell_seed(&self, beta_idx: usize, lambda_idx: usize, trial: usize, procedure: Procedure) -> u64 {
        derive_seed(
            self.master_seed,
            &[beta_idx as u64, lambda_idx as u64, trial as u64, procedure.index()],
        )
    }
}

fn check_range((lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::Config(format!(
            "variance range must satisfy 0 < low <= high, got ({lo}, {hi})"
        )));
    }
    Ok(())
}

/// Σ_V diagonal uniform on `variance_range`, then Γ with i.i.d. `N(0, 1/s)`
/// entries filled column by column.
pub fn sample_generative_config(
    master_seed: u64,
    trial: usize,
    (n, m, s): (usize, usize, usize),
    variance_range: (f64, f64),
    sigma_sq: f64,
) -> Result<GenerativeConfig> {
    check_range(variance_range)?;
    if n == 0 || s == 0 {
        return Err(Error::Config(format!("dimensions must be positive, got n={n} s={s}")));
    }
    let mut rng = rng(derive_seed(master_seed, &[CONFIG_STREAM, trial as u64]));
    let (lo, hi) = variance_range;
    let sigma_v_diag: Vec<f64> = if lo == hi {
        vec![lo; s]
    } else {
        let u = Uniform::new_inclusive(lo, hi).map_err(|e| Error::Config(e.to_string()))?;
        (0..s).map(|_| u.sample(&mut rng)).collect()
    };
    let scale = 1.0 / (s as f64).sqrt();
    let gamma = DMatrix::from_fn(n, s, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    GenerativeConfig::new(m, gamma, sigma_v_diag, sigma_sq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub beta: f64,
    pub lambda: f64,
    pub trial: usize,
    pub procedure: Procedure,
    pub converged: bool,
    /// Fixed-point iterations or optimizer steps.
    pub iterations: usize,
    pub recon_nll: Option<f64>,
    pub kl: Option<f64>,
    pub l2_penalty: Option<f64>,
    pub total: Option<f64>,
    pub sap: Option<f64>,
    pub mig: Option<f64>,
    pub im: Option<f64>,
    pub joint_mi: Option<f64>,
    pub spec_norm_b: Option<f64>,
    pub trivial_distance: Option<f64>,
    pub flags: Vec<String>,
}

impl SweepRecord {
    /// A record with every metric null and no flags.
    pub fn blank(beta: f64, lambda: f64, trial: usize, procedure: Procedure, converged: bool, iterations: usize) -> Self {
        Self {
            beta,
            lambda,
            trial,
            procedure,
            converged,
            iterations,
            recon_nll: None,
            kl: None,
            l2_penalty: None,
            total: None,
            sap: None,
            mig: None,
            im: None,
            joint_mi: None,
            spec_norm_b: None,
            trivial_distance: None,
            flags: Vec::new(),
        }
    }

    fn failed(beta: f64, lambda: f64, trial: usize, procedure: Procedure, iterations: usize, err: &Error) -> Self {
        let msg = err.to_string().replace([';', ',', '\n'], " ");
        let mut rec = Self::blank(beta, lambda, trial, procedure, false, iterations);
        rec.flags.push(format!("error:{msg}"));
        rec
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "recon_nll" => self.recon_nll,
            "kl" => self.kl,
            "l2_penalty" => self.l2_penalty,
            "total" => self.total,
            "sap" => self.sap,
            "mig" => self.mig,
            "im" => self.im,
            "joint_mi" => self.joint_mi,
            "spec_norm_b" => self.spec_norm_b,
            "trivial_distance" => self.trivial_distance,
            _ => None,
        }
    }
}

/// Metric columns, in CSV order.
pub const METRIC_COLUMNS: [&str; 10] = [
    "recon_nll",
    "kl",
    "l2_penalty",
    "total",
    "sap",
    "mig",
    "im",
    "joint_mi",
    "spec_norm_b",
    "trivial_distance",
];

pub const CSV_HEADER: [&str; 17] = [
    "beta",
    "lambda",
    "trial",
    "procedure",
    "converged",
    "iterations",
    "recon_nll",
    "kl",
    "l2_penalty",
    "total",
    "sap",
    "mig",
    "im",
    "joint_mi",
    "spec_norm_b",
    "trivial_distance",
    "flags",
];

struct TrialContext {
    cfg: GenerativeConfig,
    dynamics: Dynamics,
    objective: Objective,
}

fn evaluate_record(
    ctx: &TrialContext,
    params: &ModelParams,
    beta: f64,
    lambda: f64,
    rec: &mut SweepRecord,
) -> Result<()> {
    let obj: ObjectiveBreakdown = ctx.objective.value(params, beta, lambda)?;
    let report = evaluate_with_sigma_y(&ctx.cfg, ctx.dynamics.sigma_y(), params)?;
    rec.recon_nll = Some(obj.recon_nll);
    rec.kl = Some(obj.kl);
    rec.l2_penalty = Some(obj.l2_penalty);
    rec.total = Some(obj.total);
    rec.sap = Some(report.sap);
    rec.mig = report.mig;
    rec.im = Some(report.im);
    rec.joint_mi = Some(report.joint_mi);
    rec.spec_norm_b = Some(report.spec_norm_b);
    rec.trivial_distance = Some(ctx.dynamics.trivial_distance(params));
    rec.flags.extend(report.flags.iter().map(|f| f.to_string()));
    Ok(())
}

fn run_cell(
    sweep: &SweepConfig,
    ctx: &TrialContext,
    (bi, li, trial, procedure): (usize, usize, usize, Procedure),
) -> SweepRecord {
    let beta = sweep.beta_grid[bi];
    let lambda = sweep.lambda_grid[li];
    let seed = sweep.cell_seed(bi, li, trial, procedure);
    let init = match ctx.dynamics.random_init(seed, sweep.init_scale) {
        Ok(p) => p,
        Err(e) => return SweepRecord::failed(beta, lambda, trial, procedure, 0, &e),
    };
    let (params, converged, iterations, mut flags) = match procedure {
        Procedure::FixedPoint => match ctx.dynamics.run_fixed_point(init, beta, lambda, &sweep.fixed_point.options()) {
            Ok(run) => {
                let mut flags = Vec::new();
                if run.diagnostics.collapsed {
                    flags.push("collapsed".to_string());
                }
                if !run.converged {
                    flags.push("max_iter".to_string());
                }
                (run.state.params, run.converged, run.state.iteration, flags)
            }
            Err(abort) => {
                return SweepRecord::failed(
                    beta,
                    lambda,
                    trial,
                    procedure,
                    abort.partial.state.iteration,
                    &abort.error,
                )
            }
        },
        Procedure::Optimize => {
            let opt = OptimizerConfig {
                seed,
                ..sweep.optimizer.clone()
            };
            match optimize(&ctx.cfg, beta, lambda, &opt, &init) {
                Ok(run) => (run.params, true, run.steps, Vec::new()),
                Err(e) => {
                    let step = match e {
                        Error::NonFinite { step } => step,
                        _ => 0,
                    };
                    return SweepRecord::failed(beta, lambda, trial, procedure, step, &e);
                }
            }
        }
    };
    let mut rec = SweepRecord::blank(beta, lambda, trial, procedure, converged, iterations);
    if let Err(e) = evaluate_record(ctx, &params, beta, lambda, &mut rec) {
        rec = SweepRecord::failed(beta, lambda, trial, procedure, iterations, &e);
    }
    flags.append(&mut rec.flags);
    rec.flags = flags;
    rec
}

/// Runs every `(β, λ, trial, procedure)` cell on `threads` workers (0 = rayon
/// default). Records come back sorted by `(β, λ, trial, procedure)`.
pub fn run_sweep(sweep: &SweepConfig, threads: usize) -> Result<Vec<SweepRecord>> {
    sweep.validate()?;
    let contexts: Vec<TrialContext> = (0..sweep.trials)
        .map(|t| {
            let cfg = sweep.generative_config(t)?;
            let dynamics = Dynamics::new(cfg.clone());
            let objective = Objective::from_sigma_y(dynamics.sigma_y().clone());
            Ok(TrialContext {
                cfg,
                dynamics,
                objective,
            })
        })
        .collect::<Result<_>>()?;
    let procs = sweep.sorted_procedures();
    let mut cells = Vec::with_capacity(sweep.cell_count());
    for bi in 0..sweep.beta_grid.len() {
        for li in 0..sweep.lambda_grid.len() {
            for t in 0..sweep.trials {
                for &p in &procs {
                    cells.push((bi, li, t, p));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let records = pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| run_cell(sweep, &contexts[cell.2], cell))
            .collect::<Vec<_>>()
    });
    Ok(records)
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn write_records<W: Write>(records: &[SweepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        let mut row = vec![
            fmt_f64(r.beta),
            fmt_f64(r.lambda),
            r.trial.to_string(),
            r.procedure.to_string(),
            r.converged.to_string(),
            r.iterations.to_string(),
        ];
        row.extend(METRIC_COLUMNS.iter().map(|c| fmt_opt(r.metric(c))));
        row.push(r.flags.join(";"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_records(records: &[SweepRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_records(records, std::io::BufWriter::new(file))
}

fn parse_field<T: FromStr>(field: &str, column: &str, line: u64) -> Result<T>
where
    T::Err: fmt::Display,
{
    field.parse().map_err(|e: T::Err| Error::Record {
        line,
        message: format!("column {column}: {e} ({field:?})"),
    })
}

fn parse_real(field: &str, column: &str, line: u64) -> Result<f64> {
    let v: f64 = parse_field(field, column, line)?;
    if !v.is_finite() {
        return Err(Error::Record {
            line,
            message: format!("column {column}: non-finite value {field:?}"),
        });
    }
    Ok(v)
}

fn parse_nullable(field: &str, column: &str, line: u64) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_real(field, column, line).map(Some)
    }
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<SweepRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Record {
            line: 1,
            message: format!("unexpected header, expected {}", CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != CSV_HEADER.len() {
            return Err(Error::Record {
                line,
                message: format!("expected {} fields, found {}", CSV_HEADER.len(), row.len()),
            });
        }
        let m = |i: usize| parse_nullable(&row[i], CSV_HEADER[i], line);
        let flags = if row[16].is_empty() {
            Vec::new()
        } else {
            row[16].split(';').map(str::to_string).collect()
        };
        out.push(SweepRecord {
            beta: parse_real(&row[0], "beta", line)?,
            lambda: parse_real(&row[1], "lambda", line)?,
            trial: parse_field(&row[2], "trial", line)?,
            procedure: parse_field(&row[3], "procedure", line)?,
            converged: parse_field(&row[4], "converged", line)?,
            iterations: parse_field(&row[5], "iterations", line)?,
            recon_nll: m(6)?,
            kl: m(7)?,
            l2_penalty: m(8)?,
            total: m(9)?,
            sap: m(10)?,
            mig: m(11)?,
            im: m(12)?,
            joint_mi: m(13)?,
            spec_norm_b: m(14)?,
            trivial_distance: m(15)?,
            flags,
        });
    }
    Ok(out)
}

pub fn import_records(path: &Path) -> Result<Vec<SweepRecord>> {
    read_records(std::fs::File::open(path)?)
}

/// Location and spread of one metric in one cell; `null` entries are excluded
/// and counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub excluded: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn of(values: &[Option<f64>]) -> Self {
        let mut xs: Vec<f64> = values.iter().flatten().copied().collect();
        let excluded = values.len() - xs.len();
        if xs.is_empty() {
            return Self {
                count: 0,
                excluded,
                mean: None,
                median: None,
                q25: None,
                q75: None,
            };
        }
        xs.sort_by(f64::total_cmp);
        Self {
            count: xs.len(),
            excluded,
            mean: Some(xs.iter().sum::<f64>() / xs.len() as f64),
            median: Some(quantile(&xs, 0.5)),
            q25: Some(quantile(&xs, 0.25)),
            q75: Some(quantile(&xs, 0.75)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub beta: f64,
    pub lambda: f64,
    pub procedure: Procedure,
    pub records: usize,
    pub converged: usize,
    pub metrics: BTreeMap<String, Summary>,
}

impl AggregateRow {
    pub fn summary(&self, metric: &str) -> Option<&Summary> {
        self.metrics.get(metric)
    }
}

/// Groups by `(β, λ, procedure)`; rows come out in that order.
pub fn aggregate(records: &[SweepRecord]) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(Error::Usage("no records to aggregate".into()));
    }
    let mut groups: Vec<((f64, f64, Procedure), Vec<&SweepRecord>)> = Vec::new();
    let mut sorted: Vec<&SweepRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.beta
            .total_cmp(&b.beta)
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.procedure.cmp(&b.procedure))
    });
    for r in sorted {
        let key = (r.beta, r.lambda, r.procedure);
        match groups.last_mut() {
            Some((k, v)) if *k == key => v.push(r),
            _ => groups.push((key, vec![r])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|((beta, lambda, procedure), rs)| {
            let metrics = METRIC_COLUMNS
                .iter()
                .map(|&c| {
                    let vals: Vec<Option<f64>> = rs.iter().map(|r| r.metric(c)).collect();
                    (c.to_string(), Summary::of(&vals))
                })
                .collect();
            AggregateRow {
                beta,
                lambda,
                procedure,
                records: rs.len(),
                converged: rs.iter().filter(|r| r.converged).count(),
                metrics,
            }
        })
        .collect())
}
