//! Closed-form population objectives, their analytic gradients, and a
//! sampling oracle.
//!
//! With `R = I − AB` and `C = RΣ_YRᵀ + AΣ_WAᵀ` (the error covariance of the
//! decoder mean):
//!
//! ```text
//! recon_nll  = ½[tr(Σ_Z⁻¹C) + log det(2πΣ_Z)]
//! kl         = ½[tr Σ_W + tr(BΣ_YBᵀ) − m − log det Σ_W]
//! l2_penalty = tr C
//! total      = recon_nll + β·kl + λ·l2_penalty
//! ```
//!
//! The λ term measures `Y − AX`, without the decoder noise.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{observation_covariance, GenerativeConfig, ModelParams};
use crate::seed;
use crate::spd::SpdMatrix;
use crate::stationarity::check_weights;
use crate::Matrix;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Offset added after the softplus on Cholesky diagonals.
pub const DIAG_FLOOR: f64 = 1e-8;
pub const MIN_MC_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub recon_nll: f64,
    pub kl: f64,
    pub l2_penalty: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    pub fn assemble(recon_nll: f64, kl: f64, l2_penalty: f64, beta: f64, lambda: f64) -> Self {
        Self {
            recon_nll,
            kl,
            l2_penalty,
            total: recon_nll + beta * kl + lambda * l2_penalty,
        }
    }
}

/// Gradients of the total objective. `sigma_z` / `sigma_w` hold the symmetric
/// gradient `G` with `dF = tr(G dΣ)`; `l_z` / `l_w` are the gradients with
/// respect to the lower Cholesky factors (`2GL`, lower triangle).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub a: Matrix,
    pub b: Matrix,
    pub sigma_z: Matrix,
    pub sigma_w: Matrix,
    pub l_z: Matrix,
    pub l_w: Matrix,
}

impl ParamGradient {
    /// Euclidean norm over `(A, B, L_Z, L_W)`.
    pub fn norm(&self) -> f64 {
        sum_sq(&[&self.a, &self.b, &self.l_z, &self.l_w]).sqrt()
    }
}

fn sum_sq(ms: &[&Matrix]) -> f64 {
    ms.iter().flat_map(|m| m.iter()).map(|v| v * v).sum()
}

/// Norm of `(A, B, L_Z, L_W)` for a parameter set.
pub fn param_norm(params: &ModelParams) -> f64 {
    sum_sq(&[&params.a, &params.b, params.sigma_z.chol(), params.sigma_w.chol()]).sqrt()
}

/// The objective for a fixed observation covariance.
#[derive(Debug, Clone)]
pub struct Objective {
    sigma_y: SpdMatrix,
}

struct Pieces {
    breakdown: ObjectiveBreakdown,
    sigma_xy: Matrix,
    sigma_x: Matrix,
    err_cov: Matrix,
}

impl Objective {
    pub fn new(cfg: &GenerativeConfig) -> Self {
        Self {
            sigma_y: observation_covariance(cfg),
        }
    }

    pub fn from_sigma_y(sigma_y: SpdMatrix) -> Self {
        Self { sigma_y }
    }

    pub fn sigma_y(&self) -> &SpdMatrix {
        &self.sigma_y
    }

    fn check(&self, params: &ModelParams, beta: f64, lambda: f64) -> Result<()> {
        check_weights(beta, lambda)?;
        if params.n() != self.sigma_y.dim() || params.b.shape() != (params.m(), params.n()) {
            return Err(Error::Dimension(format!(
                "parameters are {}x{}, observation dimension is {}",
                params.n(),
                params.m(),
                self.sigma_y.dim()
            )));
        }
        if params.sigma_z.dim() != params.n() || params.sigma_w.dim() != params.m() {
            return Err(Error::Dimension("covariance shapes do not match gains".into()));
        }
        Ok(())
    }

    /// `tr_pc` supplies `tr(Σ_Z⁻¹C)` so callers that already hold the
    /// precision avoid a second O(n³) solve.
    fn pieces(
        &self,
        params: &ModelParams,
        beta: f64,
        lambda: f64,
        tr_pc: impl FnOnce(&Matrix) -> f64,
    ) -> Result<Pieces> {
        self.check(params, beta, lambda)?;
        let (n, m) = (params.n(), params.m());
        let sy = self.sigma_y.matrix();
        let (a, b) = (&params.a, &params.b);
        let sigma_xy = b * sy;
        let sigma_x = &sigma_xy * b.transpose() + params.sigma_w.matrix();
        // C = Σ_Y − AΣ_XY − Σ_XYᵀAᵀ + AΣ_XAᵀ
        let a_sxy = a * &sigma_xy;
        let mut err_cov = sy - &a_sxy - a_sxy.transpose() + a * &sigma_x * a.transpose();
        crate::spd::symmetrize_in_place(&mut err_cov);

        let recon = 0.5 * (tr_pc(&err_cov) + n as f64 * LN_2PI + params.sigma_z.log_det());
        let tr_bsb: f64 = (0..m).map(|i| (sigma_xy.row(i) * b.row(i).transpose())[0]).sum();
        let kl = 0.5 * (params.sigma_w.matrix().trace() + tr_bsb - m as f64 - params.sigma_w.log_det());
        let l2 = err_cov.trace();
        let breakdown = ObjectiveBreakdown::assemble(recon, kl, l2, beta, lambda);
        if !breakdown.total.is_finite() {
            return Err(Error::Degenerate("objective is not finite".into()));
        }
        Ok(Pieces {
            breakdown,
            sigma_xy,
            sigma_x,
            err_cov,
        })
    }

    pub fn value(&self, params: &ModelParams, beta: f64, lambda: f64) -> Result<ObjectiveBreakdown> {
        let tr = |c: &Matrix| params.sigma_z.solve(c).trace();
        Ok(self.pieces(params, beta, lambda, tr)?.breakdown)
    }

    pub fn value_and_gradient(
        &self,
        params: &ModelParams,
        beta: f64,
        lambda: f64,
    ) -> Result<(ObjectiveBreakdown, ParamGradient)> {
        self.check(params, beta, lambda)?;
        let prec = params.sigma_z.inverse()?.into_matrix();
        let p = self.pieces(params, beta, lambda, |c| prec.dot(c))?;
        let (n, m) = (params.n(), params.m());
        let sy = self.sigma_y.matrix();
        let a = &params.a;

        // K = ½Σ_Z⁻¹ + λI
        let mut k = &prec * 0.5;
        for i in 0..n {
            k[(i, i)] += lambda;
        }
        let grad_a = (&k * (a * &p.sigma_x - p.sigma_xy.transpose())) * 2.0;
        // −2AᵀK(I − AB)Σ_Y + βBΣ_Y = −2AᵀK(Σ_Y − AΣ_XY) + βΣ_XY
        let ka = &k * a;
        let grad_b = ka.transpose() * (sy - a * &p.sigma_xy) * -2.0 + &p.sigma_xy * beta;
        let w_inv = params.sigma_w.inverse()?.into_matrix();
        let mut grad_sw = a.transpose() * &ka + (DMatrix::identity(m, m) - w_inv) * (0.5 * beta);
        let pc = &prec * &p.err_cov;
        let mut grad_sz = (&prec - &pc * &prec) * 0.5;
        crate::spd::symmetrize_in_place(&mut grad_sw);
        crate::spd::symmetrize_in_place(&mut grad_sz);

        let l_z = chol_gradient(&grad_sz, params.sigma_z.chol());
        let l_w = chol_gradient(&grad_sw, params.sigma_w.chol());
        Ok((
            p.breakdown,
            ParamGradient {
                a: grad_a,
                b: grad_b,
                sigma_z: grad_sz,
                sigma_w: grad_sw,
                l_z,
                l_w,
            },
        ))
    }
}

/// `∂F/∂L = lower(2GL)` for `Σ = LLᵀ`.
fn chol_gradient(g: &Matrix, l: &Matrix) -> Matrix {
    (g * l * 2.0).lower_triangle()
}

pub fn objective_value(
    cfg: &GenerativeConfig,
    params: &ModelParams,
    beta: f64,
    lambda: f64,
) -> Result<ObjectiveBreakdown> {
    params.check_against(cfg)?;
    Objective::new(cfg).value(params, beta, lambda)
}

pub fn objective_gradient(
    cfg: &GenerativeConfig,
    params: &ModelParams,
    beta: f64,
    lambda: f64,
) -> Result<ParamGradient> {
    params.check_against(cfg)?;
    Ok(Objective::new(cfg).value_and_gradient(params, beta, lambda)?.1)
}

pub fn softplus(r: f64) -> f64 {
    r.max(0.0) + (-r.abs()).exp().ln_1p()
}

pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(r: f64) -> f64 {
    if r >= 0.0 {
        1.0 / (1.0 + (-r).exp())
    } else {
        let e = r.exp();
        e / (1.0 + e)
    }
}

/// Unconstrained coordinates used by the optimizer. `lz` / `lw` are lower
/// triangular; their diagonals hold raw values `r` with
/// `L_ii = softplus(r) + 1e-8`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawParams {
    pub a: Matrix,
    pub b: Matrix,
    pub lz: Matrix,
    pub lw: Matrix,
}

fn raw_from_chol(l: &Matrix) -> Result<Matrix> {
    let mut raw = l.lower_triangle();
    for i in 0..raw.nrows() {
        let d = raw[(i, i)] - DIAG_FLOOR;
        if !(d > 0.0) {
            return Err(Error::Degenerate(format!(
                "Cholesky diagonal {} is below the parameterization floor",
                raw[(i, i)]
            )));
        }
        raw[(i, i)] = softplus_inverse(d);
    }
    Ok(raw)
}

fn chol_from_raw(raw: &Matrix) -> Matrix {
    let mut l = raw.lower_triangle();
    for i in 0..l.nrows() {
        l[(i, i)] = softplus(l[(i, i)]) + DIAG_FLOOR;
    }
    l
}

fn covariance(l: Matrix) -> Result<SpdMatrix> {
    SpdMatrix::from_cholesky(l)
}

impl RawParams {
    pub fn from_params(params: &ModelParams) -> Result<Self> {
        Ok(Self {
            a: params.a.clone(),
            b: params.b.clone(),
            lz: raw_from_chol(params.sigma_z.chol())?,
            lw: raw_from_chol(params.sigma_w.chol())?,
        })
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        ModelParams::new(
            self.a.clone(),
            self.b.clone(),
            covariance(chol_from_raw(&self.lz))?,
            covariance(chol_from_raw(&self.lw))?,
        )
    }

    /// Gradient in raw coordinates from a [`ParamGradient`] taken at
    /// `self.to_params()`.
    pub fn pullback(&self, g: &ParamGradient) -> RawParams {
        let chain = |gl: &Matrix, raw: &Matrix| {
            let mut out = gl.lower_triangle();
            for i in 0..out.nrows() {
                out[(i, i)] *= sigmoid(raw[(i, i)]);
            }
            out
        };
        RawParams {
            a: g.a.clone(),
            b: g.b.clone(),
            lz: chain(&g.l_z, &self.lz),
            lw: chain(&g.l_w, &self.lw),
        }
    }

    pub fn norm(&self) -> f64 {
        sum_sq(&[&self.a, &self.b, &self.lz, &self.lw]).sqrt()
    }

    /// Mutable views of the four blocks, in a fixed order.
    pub fn blocks_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.a, &mut self.b, &mut self.lz, &mut self.lw]
    }

    pub fn blocks(&self) -> [&Matrix; 4] {
        [&self.a, &self.b, &self.lz, &self.lw]
    }
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloObjective {
    pub recon_nll: Estimate,
    pub kl: Estimate,
    pub l2_penalty: Estimate,
    pub total: Estimate,
    pub n_samples: usize,
}

impl MonteCarloObjective {
    pub fn means(&self) -> ObjectiveBreakdown {
        ObjectiveBreakdown {
            recon_nll: self.recon_nll.mean,
            kl: self.kl.mean,
            l2_penalty: self.l2_penalty.mean,
            total: self.total.mean,
        }
    }
}

#[derive(Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn estimate(&self) -> Estimate {
        let var = self.m2 / (self.n - 1.0);
        Estimate {
            mean: self.mean,
            se: (var / self.n).sqrt(),
        }
    }
}

/// Sampling estimate of the three objective terms. Draws `V`, observation
/// noise and encoder noise, then averages `−log p(y|x)`,
/// `log q(x|y) − log p(x)` and `‖y − Ax‖²`.
pub fn monte_carlo_objective(
    cfg: &GenerativeConfig,
    params: &ModelParams,
    beta: f64,
    lambda: f64,
    n_samples: usize,
    seed: u64,
) -> Result<MonteCarloObjective> {
    check_weights(beta, lambda)?;
    params.check_against(cfg)?;
    if n_samples < MIN_MC_SAMPLES {
        return Err(Error::Config(format!(
            "need at least {MIN_MC_SAMPLES} samples, got {n_samples}"
        )));
    }
    let (n, m, s) = (cfg.n(), cfg.m(), cfg.s());
    let mut rng = seed::rng(seed);
    let v_std: Vec<f64> = cfg.sigma_v_diag().iter().map(|v| v.sqrt()).collect();
    let noise_std = cfg.sigma_sq().sqrt();
    let lw = params.sigma_w.chol();
    let recon_const = 0.5 * (n as f64 * LN_2PI + params.sigma_z.log_det());
    let kl_const = -0.5 * params.sigma_w.log_det();

    let mut acc_r = Moments::default();
    let mut acc_k = Moments::default();
    let mut acc_l = Moments::default();
    let mut acc_t = Moments::default();
    const BLOCK: usize = 2048;
    let mut done = 0;
    while done < n_samples {
        let cols = BLOCK.min(n_samples - done);
        // Column-by-column draw order: V, observation noise, encoder noise.
        let mut v = DMatrix::zeros(s, cols);
        let mut eps = DMatrix::zeros(n, cols);
        let mut xi = DMatrix::zeros(m, cols);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        for c in 0..cols {
            for j in 0..s {
                v[(j, c)] = v_std[j] * draw();
            }
            for i in 0..n {
                eps[(i, c)] = noise_std * draw();
            }
            for k in 0..m {
                xi[(k, c)] = draw();
            }
        }
        let y = cfg.gamma() * v + eps;
        let x = &params.b * &y + lw * &xi;
        let resid = &y - &params.a * &x;
        let white = params.sigma_z.whiten(&resid);
        for c in 0..cols {
            let r = recon_const + 0.5 * white.column(c).norm_squared();
            let k = kl_const + 0.5 * (x.column(c).norm_squared() - xi.column(c).norm_squared());
            let l = resid.column(c).norm_squared();
            acc_r.push(r);
            acc_k.push(k);
            acc_l.push(l);
            acc_t.push(r + beta * k + lambda * l);
        }
        done += cols;
    }
    Ok(MonteCarloObjective {
        recon_nll: acc_r.estimate(),
        kl: acc_k.estimate(),
        l2_penalty: acc_l.estimate(),
        total: acc_t.estimate(),
        n_samples,
    })
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCheck {
    /// Largest `|central difference − analytic|` over the probed coordinates.
    pub max_abs_error: f64,
    /// Largest `|central difference|`, the denominator of `rel_error`.
    pub scale: f64,
    pub rel_error: f64,
    pub coordinates: usize,
}

/// Compares the analytic gradient against central differences of step `h`
/// over `(A, B, L_Z, L_W)` (lower triangles only). With `max_coords` set, a
/// seeded random subset of that many coordinates is probed instead of all.
pub fn gradient_check(
    objective: &Objective,
    params: &ModelParams,
    beta: f64,
    lambda: f64,
    h: f64,
    max_coords: Option<(usize, u64)>,
) -> Result<GradientCheck> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("step h must be positive, got {h}")));
    }
    let (_, grad) = objective.value_and_gradient(params, beta, lambda)?;
    let analytic = [&grad.a, &grad.b, &grad.l_z, &grad.l_w];
    let mut coords = Vec::new();
    for (block, g) in analytic.iter().enumerate() {
        for j in 0..g.ncols() {
            for i in 0..g.nrows() {
                if block < 2 || i >= j {
                    coords.push((block, i, j));
                }
            }
        }
    }
    if let Some((k, seed)) = max_coords {
        if k < coords.len() {
            coords = rand::seq::index::sample(&mut seed::rng(seed), coords.len(), k)
                .into_iter()
                .map(|i| coords[i])
                .collect();
        }
    }
    let eval = |block: usize, i: usize, j: usize, delta: f64| -> Result<f64> {
        let mut q = params.clone();
        match block {
            0 => q.a[(i, j)] += delta,
            1 => q.b[(i, j)] += delta,
            2 => {
                let mut l = q.sigma_z.chol().clone();
                l[(i, j)] += delta;
                q.sigma_z = SpdMatrix::from_cholesky(l)?;
            }
            _ => {
                let mut l = q.sigma_w.chol().clone();
                l[(i, j)] += delta;
                q.sigma_w = SpdMatrix::from_cholesky(l)?;
            }
        }
        Ok(objective.value(&q, beta, lambda)?.total)
    };
    let (mut max_abs_error, mut scale) = (0.0f64, 0.0f64);
    for &(block, i, j) in &coords {
        let fd = (eval(block, i, j, h)? - eval(block, i, j, -h)?) / (2.0 * h);
        max_abs_error = max_abs_error.max((fd - analytic[block][(i, j)]).abs());
        scale = scale.max(fd.abs());
    }
    Ok(GradientCheck {
        max_abs_error,
        scale,
        rel_error: max_abs_error / scale.max(f64::MIN_POSITIVE),
        coordinates: coords.len(),
    })
}
