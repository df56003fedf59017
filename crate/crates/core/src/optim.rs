//! Full-batch AdamW on the closed-form objective, over `(A, B)` and the
//! softplus-diagonal Cholesky factors of `Σ_Z` and `Σ_W`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GenerativeConfig, ModelParams};
use crate::objective::{Objective, ObjectiveBreakdown, RawParams};
use crate::stationarity::{check_weights, Dynamics};
use crate::Matrix;

/// Objective rows are recorded every this many steps (plus the last one).
pub const RECORD_EVERY: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
    /// Gain initialization scale for [`optimize_seeded`].
    pub init_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            steps: 20_000,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be nonnegative, got {}", self.weight_decay)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveRow {
    pub step: usize,
    #[serde(flatten)]
    pub objective: ObjectiveBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeRun {
    pub params: ModelParams,
    pub objective: ObjectiveBreakdown,
    /// Gradient norm in raw coordinates at the terminal parameters.
    pub grad_norm: f64,
    pub steps: usize,
    pub trace: Vec<ObjectiveRow>,
}

struct Adam {
    m: RawParams,
    v: RawParams,
    t: i32,
}

impl Adam {
    fn new(shape: &RawParams) -> Self {
        let zeros = |x: &Matrix| Matrix::zeros(x.nrows(), x.ncols());
        let z = RawParams {
            a: zeros(&shape.a),
            b: zeros(&shape.b),
            lz: zeros(&shape.lz),
            lw: zeros(&shape.lw),
        };
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    fn update(&mut self, theta: &mut RawParams, grad: &RawParams, opt: &OptimizerConfig) {
        self.t += 1;
        let (b1, b2) = opt.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = opt.learning_rate;
        let wd = opt.weight_decay;
        let eps = opt.epsilon;
        let ms = self.m.blocks_mut();
        let vs = self.v.blocks_mut();
        let gs = grad.blocks();
        for (((p, m), v), g) in theta.blocks_mut().into_iter().zip(ms).zip(vs).zip(gs) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] -= lr * (step + wd * p[i]);
            }
        }
    }
}

/// Runs `opt.steps` AdamW updates from `init`. Upper-triangle entries of the
/// Cholesky blocks carry zero gradient and stay at zero.
pub fn optimize(
    cfg: &GenerativeConfig,
    beta: f64,
    lambda: f64,
    opt: &OptimizerConfig,
    init: &ModelParams,
) -> Result<OptimizeRun> {
    opt.validate()?;
    check_weights(beta, lambda)?;
    init.check_against(cfg)?;
    let objective = Objective::new(cfg);
    let mut theta = RawParams::from_params(init)?;
    let mut adam = Adam::new(&theta);
    let mut trace = Vec::with_capacity(opt.steps / RECORD_EVERY + 2);

    let mut step = 0;
    loop {
        let params = theta.to_params().map_err(|_| Error::NonFinite { step })?;
        let (value, grad) = objective
            .value_and_gradient(&params, beta, lambda)
            .map_err(|e| match e {
                Error::Degenerate(_) | Error::NotPositiveDefinite(_) => Error::NonFinite { step },
                other => other.at_iteration(step),
            })?;
        let raw_grad = theta.pullback(&grad);
        let grad_norm = raw_grad.norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { step });
        }
        if step % RECORD_EVERY == 0 || step == opt.steps {
            trace.push(ObjectiveRow {
                step,
                objective: value,
                grad_norm,
            });
        }
        if step == opt.steps {
            return Ok(OptimizeRun {
                params,
                objective: value,
                grad_norm,
                steps: step,
                trace,
            });
        }
        adam.update(&mut theta, &raw_grad, opt);
        step += 1;
    }
}

/// [`optimize`] from the fixed-point initializer seeded with `opt.seed`.
pub fn optimize_seeded(
    cfg: &GenerativeConfig,
    beta: f64,
    lambda: f64,
    opt: &OptimizerConfig,
) -> Result<OptimizeRun> {
    let init = Dynamics::new(cfg.clone()).random_init(opt.seed, opt.init_scale)?;
    optimize(cfg, beta, lambda, opt, &init)
}

pub fn write_objective_trace_csv<W: Write>(rows: &[ObjectiveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "recon_nll", "kl", "l2_penalty", "total", "grad_norm"])?;
    for r in rows {
        let o = &r.objective;
        w.write_record([
            r.step.to_string(),
            format!("{:.16e}", o.recon_nll),
            format!("{:.16e}", o.kl),
            format!("{:.16e}", o.l2_penalty),
            format!("{:.16e}", o.total),
            format!("{:.16e}", r.grad_norm),
        ])?;
    }
    w.flush()?;
    Ok(())
}
