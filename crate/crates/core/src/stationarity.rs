//! Fixed-point iteration of the β-VAE / λβ-VAE stationarity conditions and
//! runtime checks of the collapse mechanics.
//!
//! One step maps `(A, B, Σ_Z, Σ_W)` as follows, in this order:
//!
//! ```text
//! A   <- (Σ_Y⁻¹ + BᵀΣ_W⁻¹B)⁻¹ BᵀΣ_W⁻¹        (old B, Σ_W)
//! Σ_Z <- (Σ_Y⁻¹ + BᵀΣ_W⁻¹B)⁻¹
//! B   <- (I + AᵀMA)⁻¹ AᵀM                      (new A, Σ_Z)
//! Σ_W <- (I + AᵀMA)⁻¹,      M = (Σ_Z⁻¹ + 2λI)/β
//! ```
//!
//! With this order and `λ = 0` the encoder gain obeys
//! `B⁽ᵗ⁺ⁿ⁾ = β⁻ⁿ Σ_W⁽ᵗ⁺ⁿ⁾ [Σ_W⁽ᵗ⁾]⁻¹ B⁽ᵗ⁾` exactly, which
//! [`verify_gain_recursion`] and the per-run diagnostics check numerically.

use std::io::Write;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gaussian::{observation_covariance, GenerativeConfig, ModelParams};
use crate::seed;
use crate::spd::SpdMatrix;
use crate::spectral::norm2;
use crate::Matrix;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 10_000;
pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_HISTORY_CAPACITY: usize = 4096;
pub const GAIN_CHECK_EVERY: usize = 10;

/// Which linear system each half-step solves.
///
/// `Auto` picks the `m×m` latent-space form when `m < n` and the `n×n`
/// observation-space (Woodbury) form otherwise. The other two force a form,
/// which is only useful for cross-checking them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveForm {
    #[default]
    Auto,
    Latent,
    Observation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub spec_norm_b: f64,
    pub residual: f64,
}

/// Encoder parameters captured at a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub b: Matrix,
    pub sigma_w: SpdMatrix,
}

/// Bounded record of a trajectory. Once `capacity` entries are held every
/// other one is dropped and the recording stride doubles, so memory stays
/// bounded however long the run.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub entries: Vec<HistoryEntry>,
    pub snapshots: Vec<Snapshot>,
    capacity: usize,
    stride: usize,
    capture_snapshots: bool,
}

impl History {
    pub fn new(capacity: usize, capture_snapshots: bool) -> Self {
        Self {
            entries: Vec::new(),
            snapshots: Vec::new(),
            capacity: capacity.max(2),
            stride: 1,
            capture_snapshots,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    fn record(&mut self, iteration: usize, params: &ModelParams, residual: f64) {
        if iteration % self.stride != 0 {
            return;
        }
        if self.entries.len() >= self.capacity {
            self.stride *= 2;
            let stride = self.stride;
            self.entries.retain(|e| e.iteration % stride == 0);
            self.snapshots.retain(|s| s.iteration % stride == 0);
            if iteration % stride != 0 {
                return;
            }
        }
        self.entries.push(HistoryEntry {
            iteration,
            spec_norm_b: norm2(&params.b),
            residual,
        });
        if self.capture_snapshots {
            self.snapshots.push(Snapshot {
                iteration,
                b: params.b.clone(),
                sigma_w: params.sigma_w.clone(),
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointState {
    pub params: ModelParams,
    pub iteration: usize,
    /// Max over the four blocks of `‖Δ‖_F / (‖old‖_F + 1e-300)` for the last
    /// step.
    pub residual: f64,
    pub history: Option<History>,
}

impl FixedPointState {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            iteration: 0,
            residual: f64::INFINITY,
            history: None,
        }
    }

    pub fn with_history(params: ModelParams, history: History) -> Self {
        let mut state = Self::new(params);
        let mut history = history;
        history.record(0, &state.params, f64::INFINITY);
        state.history = Some(history);
        state
    }
}

/// Relative error of the gain identity between checkpoints `from` and `to`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainCheck {
    pub from: usize,
    pub to: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseDiagnostics {
    /// `‖Σ_W‖₂` after every iteration.
    pub sigma_w_spectral_norms: Vec<f64>,
    pub gain_recursion_residuals: Vec<GainCheck>,
    pub collapsed: bool,
    pub trivial_distance: f64,
}

/// One row of a trajectory dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub residual: f64,
    pub spec_norm_b: f64,
    pub spec_norm_sigma_w: f64,
    pub trivial_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub collapse_threshold: f64,
    /// Keep a thinned history; `Some(true)` also keeps `(B, Σ_W)` snapshots.
    pub history: Option<bool>,
    pub history_capacity: usize,
    /// Record a [`TraceRow`] per iteration (costs an n×n spectral norm each).
    pub trace: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            collapse_threshold: DEFAULT_COLLAPSE_THRESHOLD,
            history: None,
            history_capacity: DEFAULT_HISTORY_CAPACITY,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointRun {
    pub state: FixedPointState,
    pub diagnostics: CollapseDiagnostics,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

/// A step failed; carries the error and everything recorded before it.
#[derive(Debug)]
pub struct FixedPointAbort {
    pub error: Error,
    pub partial: FixedPointRun,
}

impl std::fmt::Display for FixedPointAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (after {} completed iterations)",
            self.error, self.partial.state.iteration
        )
    }
}

impl std::error::Error for FixedPointAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<FixedPointAbort> for Error {
    fn from(abort: FixedPointAbort) -> Self {
        abort.error
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collapse {
    pub collapsed: bool,
    pub trivial_distance: f64,
}

/// A generative config with its `Σ_Y` factored once; every step and check
/// runs against it.
#[derive(Debug, Clone)]
pub struct Dynamics {
    cfg: GenerativeConfig,
    sigma_y: SpdMatrix,
    form: SolveForm,
}

impl Dynamics {
    pub fn new(cfg: GenerativeConfig) -> Self {
        let sigma_y = observation_covariance(&cfg);
        Self {
            cfg,
            sigma_y,
            form: SolveForm::Auto,
        }
    }

    pub fn with_form(mut self, form: SolveForm) -> Self {
        self.form = form;
        self
    }

    pub fn cfg(&self) -> &GenerativeConfig {
        &self.cfg
    }

    pub fn sigma_y(&self) -> &SpdMatrix {
        &self.sigma_y
    }

    fn latent_form(&self) -> bool {
        match self.form {
            SolveForm::Auto => self.cfg.m() < self.cfg.n(),
            SolveForm::Latent => true,
            SolveForm::Observation => false,
        }
    }

    /// `(A, Σ_Z)` from the incoming `(B, Σ_W)`.
    pub fn decoder_update(&self, b: &Matrix, sigma_w: &SpdMatrix) -> Result<(Matrix, SpdMatrix)> {
        let sy = self.sigma_y.matrix();
        if self.latent_form() {
            // A = Σ_Y Bᵀ (BΣ_YBᵀ + Σ_W)⁻¹,  Σ_Z = Σ_Y - A (Σ_Y Bᵀ)ᵀ
            let t = sy * b.transpose();
            let k = SpdMatrix::symmetrized(b * &t + sigma_w.matrix()).map_err(|e| {
                Error::NotPositiveDefinite(format!("B Σ_Y Bᵀ + Σ_W: {e}"))
            })?;
            let a = k.solve(&t.transpose()).transpose();
            let sigma_z = SpdMatrix::symmetrized(sy - &a * t.transpose()).map_err(|e| {
                Error::NotPositiveDefinite(format!("decoder covariance Σ_Z: {e}"))
            })?;
            Ok((a, sigma_z))
        } else {
            let winv_b = sigma_w.solve(b);
            let sy_inv = self.sigma_y.inverse()?;
            let precision = SpdMatrix::symmetrized(sy_inv.matrix() + b.transpose() * &winv_b)
                .map_err(|e| Error::NotPositiveDefinite(format!("Σ_Y⁻¹ + BᵀΣ_W⁻¹B: {e}")))?;
            let a = precision.solve(&winv_b.transpose());
            let sigma_z = precision.inverse()?;
            Ok((a, sigma_z))
        }
    }

    /// `(B, Σ_W)` from the new `(A, Σ_Z)`.
    pub fn encoder_update(
        &self,
        a: &Matrix,
        sigma_z: &SpdMatrix,
        beta: f64,
        lambda: f64,
    ) -> Result<(Matrix, SpdMatrix)> {
        let m = a.ncols();
        if self.latent_form() {
            // AᵀM = (Σ_Z⁻¹A + 2λA)ᵀ / β
            let mut ma = sigma_z.solve(a);
            if lambda != 0.0 {
                ma += a * (2.0 * lambda);
            }
            ma /= beta;
            let mut gram = a.transpose() * &ma;
            for i in 0..m {
                gram[(i, i)] += 1.0;
            }
            let k = SpdMatrix::symmetrized(gram)
                .map_err(|e| Error::NotPositiveDefinite(format!("I + AᵀMA: {e}")))?;
            let sigma_w = k.inverse()?;
            let b = sigma_w.matrix() * ma.transpose();
            Ok((b, sigma_w))
        } else {
            // B = Aᵀ(M⁻¹ + AAᵀ)⁻¹,  Σ_W = I - Aᵀ(M⁻¹ + AAᵀ)⁻¹A
            let n = a.nrows();
            let mut mm = sigma_z.inverse()?.into_matrix();
            for i in 0..n {
                mm[(i, i)] += 2.0 * lambda;
            }
            mm /= beta;
            let m_inv = SpdMatrix::symmetrized(mm)?.inverse()?;
            let r = SpdMatrix::symmetrized(m_inv.matrix() + a * a.transpose())
                .map_err(|e| Error::NotPositiveDefinite(format!("M⁻¹ + AAᵀ: {e}")))?;
            let r_inv_a = r.solve(a);
            let b = r_inv_a.transpose();
            let sigma_w = SpdMatrix::symmetrized(DMatrix::identity(m, m) - a.transpose() * r_inv_a)
                .map_err(|e| Error::NotPositiveDefinite(format!("encoder covariance Σ_W: {e}")))?;
            Ok((b, sigma_w))
        }
    }

    fn step_params(&self, params: &ModelParams, beta: f64, lambda: f64) -> Result<ModelParams> {
        let (a, sigma_z) = self.decoder_update(&params.b, &params.sigma_w)?;
        let (b, sigma_w) = self.encoder_update(&a, &sigma_z, beta, lambda)?;
        if !(a.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite())) {
            return Err(Error::Degenerate("non-finite gain after update".into()));
        }
        Ok(ModelParams {
            a,
            b,
            sigma_z,
            sigma_w,
        })
    }

    pub fn beta_step(&self, state: &FixedPointState, beta: f64) -> Result<FixedPointState> {
        self.lambda_beta_step(state, beta, 0.0)
    }

    pub fn lambda_beta_step(
        &self,
        state: &FixedPointState,
        beta: f64,
        lambda: f64,
    ) -> Result<FixedPointState> {
        let mut next = state.clone();
        self.advance(&mut next, beta, lambda)?;
        Ok(next)
    }

    /// In-place form of [`Dynamics::lambda_beta_step`]; `state` is left
    /// untouched on error.
    pub fn advance(&self, state: &mut FixedPointState, beta: f64, lambda: f64) -> Result<()> {
        check_weights(beta, lambda)?;
        state.params.check_against(&self.cfg)?;
        let iteration = state.iteration + 1;
        let params = self
            .step_params(&state.params, beta, lambda)
            .map_err(|e| e.at_iteration(iteration))?;
        let residual = residual(&state.params, &params);
        if let Some(h) = state.history.as_mut() {
            h.record(iteration, &params, residual);
        }
        state.params = params;
        state.iteration = iteration;
        state.residual = residual;
        Ok(())
    }

    /// `(0, 0, Σ_Y, I_m)`.
    pub fn trivial_solution(&self) -> ModelParams {
        let (n, m) = (self.cfg.n(), self.cfg.m());
        ModelParams {
            a: DMatrix::zeros(n, m),
            b: DMatrix::zeros(m, n),
            sigma_z: self.sigma_y.clone(),
            sigma_w: SpdMatrix::identity(m),
        }
    }

    /// `max(‖A‖₂, ‖B‖₂, ‖Σ_Z − Σ_Y‖₂, ‖Σ_W − I‖₂)`.
    pub fn trivial_distance(&self, params: &ModelParams) -> f64 {
        let m = self.cfg.m();
        let dz = params.sigma_z.matrix() - self.sigma_y.matrix();
        let dw = params.sigma_w.matrix() - DMatrix::<f64>::identity(m, m);
        [norm2(&params.a), norm2(&params.b), norm2(&dz), norm2(&dw)]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn detect_collapse(&self, params: &ModelParams, threshold: f64) -> Collapse {
        let trivial_distance = self.trivial_distance(params);
        Collapse {
            collapsed: trivial_distance <= threshold,
            trivial_distance,
        }
    }

    /// Gaussian gains with standard deviation `scale/√fan_in`, `Σ_Z = Σ_Y`,
    /// `Σ_W = I`.
    pub fn random_init(&self, seed: u64, scale: f64) -> Result<ModelParams> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("init scale must be positive, got {scale}")));
        }
        let (n, m) = (self.cfg.n(), self.cfg.m());
        let mut rng = seed::rng(seed);
        let da = Normal::new(0.0, scale / (m as f64).sqrt()).expect("positive std");
        let db = Normal::new(0.0, scale / (n as f64).sqrt()).expect("positive std");
        let a = DMatrix::from_fn(n, m, |_, _| da.sample(&mut rng));
        let b = DMatrix::from_fn(m, n, |_, _| db.sample(&mut rng));
        Ok(ModelParams {
            a,
            b,
            sigma_z: self.sigma_y.clone(),
            sigma_w: SpdMatrix::identity(m),
        })
    }

    pub fn run_fixed_point(
        &self,
        init: ModelParams,
        beta: f64,
        lambda: f64,
        opts: &FixedPointOptions,
    ) -> std::result::Result<FixedPointRun, FixedPointAbort> {
        let abort_early = |error: Error, params: ModelParams| FixedPointAbort {
            error,
            partial: FixedPointRun {
                state: FixedPointState::new(params),
                diagnostics: CollapseDiagnostics {
                    sigma_w_spectral_norms: Vec::new(),
                    gain_recursion_residuals: Vec::new(),
                    collapsed: false,
                    trivial_distance: f64::NAN,
                },
                converged: false,
                trace: Vec::new(),
            },
        };
        if !(opts.tol > 0.0) || opts.max_iter == 0 {
            return Err(abort_early(
                Error::Config(format!(
                    "tol must be positive and max_iter >= 1 (got {}, {})",
                    opts.tol, opts.max_iter
                )),
                init,
            ));
        }
        if let Err(e) = check_weights(beta, lambda).and_then(|_| init.check_against(&self.cfg)) {
            return Err(abort_early(e, init));
        }

        let mut state = match opts.history {
            Some(snapshots) => {
                FixedPointState::with_history(init, History::new(opts.history_capacity, snapshots))
            }
            None => FixedPointState::new(init),
        };
        let mut sigma_w_norms = Vec::new();
        let mut gain_checks = Vec::new();
        let mut trace = Vec::new();
        let mut checkpoint = (0usize, state.params.b.clone(), state.params.sigma_w.clone());
        let mut converged = false;
        let mut failure = None;

        while state.iteration < opts.max_iter {
            match self.advance(&mut state, beta, lambda) {
                Ok(()) => {}
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
            let p = &state.params;
            let sw_norm = norm2(p.sigma_w.matrix());
            sigma_w_norms.push(sw_norm);
            if opts.trace {
                trace.push(TraceRow {
                    iteration: state.iteration,
                    residual: state.residual,
                    spec_norm_b: norm2(&p.b),
                    spec_norm_sigma_w: sw_norm,
                    trivial_distance: self.trivial_distance(p),
                });
            }
            let done = state.residual < opts.tol;
            if state.iteration % GAIN_CHECK_EVERY == 0 || done {
                let (t0, b0, w0) = &checkpoint;
                gain_checks.push(GainCheck {
                    from: *t0,
                    to: state.iteration,
                    rel_error: gain_identity_error(
                        b0,
                        w0,
                        &p.b,
                        &p.sigma_w,
                        beta,
                        state.iteration - t0,
                    ),
                });
                checkpoint = (state.iteration, p.b.clone(), p.sigma_w.clone());
            }
            if done {
                converged = true;
                break;
            }
        }

        let collapse = self.detect_collapse(&state.params, opts.collapse_threshold);
        let run = FixedPointRun {
            state,
            diagnostics: CollapseDiagnostics {
                sigma_w_spectral_norms: sigma_w_norms,
                gain_recursion_residuals: gain_checks,
                collapsed: collapse.collapsed,
                trivial_distance: collapse.trivial_distance,
            },
            converged,
            trace,
        };
        match failure {
            Some(error) => Err(FixedPointAbort {
                error,
                partial: run,
            }),
            None => Ok(run),
        }
    }
}

pub(crate) fn check_weights(beta: f64, lambda: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    Ok(())
}

fn frobenius(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn rel_change(old: &Matrix, new: &Matrix) -> f64 {
    frobenius(&(new - old)) / (frobenius(old) + 1e-300)
}

/// Largest relative Frobenius change over the four parameter blocks.
///
/// The norms are unscaled, so a block whose entries fall below ~1e-154
/// has a norm that underflows to zero; a collapsing gain registers as
/// converged once it reaches that scale.
pub fn residual(old: &ModelParams, new: &ModelParams) -> f64 {
    [
        rel_change(&old.a, &new.a),
        rel_change(&old.b, &new.b),
        rel_change(old.sigma_z.matrix(), new.sigma_z.matrix()),
        rel_change(old.sigma_w.matrix(), new.sigma_w.matrix()),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// `‖B_to − β⁻ⁿ Σ_W,to Σ_W,from⁻¹ B_from‖₂ / max(‖B_to‖₂, 1e-300)`.
pub fn gain_identity_error(
    b_from: &Matrix,
    w_from: &SpdMatrix,
    b_to: &Matrix,
    w_to: &SpdMatrix,
    beta: f64,
    steps: usize,
) -> f64 {
    let contraction = beta.powi(-(steps as i32));
    let predicted = w_to.matrix() * w_from.solve(b_from) * contraction;
    norm2(&(b_to - predicted)) / norm2(b_to).max(1e-300)
}

/// Checks the gain identity between consecutive snapshots of a trajectory
/// recorded with snapshots enabled.
pub fn verify_gain_recursion(state: &FixedPointState, beta: f64) -> Result<Vec<GainCheck>> {
    let snaps = match &state.history {
        Some(h) if !h.snapshots.is_empty() => &h.snapshots,
        _ => {
            return Err(Error::Usage(
                "gain recursion needs a trajectory recorded with snapshots".into(),
            ))
        }
    };
    Ok(snaps
        .windows(2)
        .map(|w| GainCheck {
            from: w[0].iteration,
            to: w[1].iteration,
            rel_error: gain_identity_error(
                &w[0].b,
                &w[0].sigma_w,
                &w[1].b,
                &w[1].sigma_w,
                beta,
                w[1].iteration - w[0].iteration,
            ),
        })
        .collect())
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iteration",
        "residual",
        "spec_norm_B",
        "spec_norm_sigma_w",
        "trivial_distance",
    ])?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            format!("{:.16e}", r.residual),
            format!("{:.16e}", r.spec_norm_b),
            format!("{:.16e}", r.spec_norm_sigma_w),
            format!("{:.16e}", r.trivial_distance),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// Free-function forms for callers holding only a config. Each builds a
// [`Dynamics`] (and so factors Σ_Y); loops should hold a `Dynamics` instead.

pub fn beta_step(state: &FixedPointState, cfg: &GenerativeConfig, beta: f64) -> Result<FixedPointState> {
    Dynamics::new(cfg.clone()).beta_step(state, beta)
}

pub fn lambda_beta_step(
    state: &FixedPointState,
    cfg: &GenerativeConfig,
    beta: f64,
    lambda: f64,
) -> Result<FixedPointState> {
    Dynamics::new(cfg.clone()).lambda_beta_step(state, beta, lambda)
}

pub fn trivial_solution(cfg: &GenerativeConfig) -> ModelParams {
    Dynamics::new(cfg.clone()).trivial_solution()
}

pub fn random_init(cfg: &GenerativeConfig, seed: u64, scale: f64) -> Result<ModelParams> {
    Dynamics::new(cfg.clone()).random_init(seed, scale)
}

pub fn detect_collapse(params: &ModelParams, cfg: &GenerativeConfig, threshold: f64) -> Collapse {
    Dynamics::new(cfg.clone()).detect_collapse(params, threshold)
}

pub fn run_fixed_point(
    init: ModelParams,
    cfg: &GenerativeConfig,
    beta: f64,
    lambda: f64,
    opts: &FixedPointOptions,
) -> std::result::Result<FixedPointRun, FixedPointAbort> {
    Dynamics::new(cfg.clone()).run_fixed_point(init, beta, lambda, opts)
}
