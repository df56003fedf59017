//! The invariant suite behind `lbvae verify`.

use rand::Rng;
use serde::Serialize;

use lbvae_core::assignment::max_weight_matching;
use lbvae_core::objective::{gradient_check, monte_carlo_objective, Objective};
use lbvae_core::seed::{derive_seed, rng};
use lbvae_core::stationarity::{Dynamics, FixedPointOptions};
use lbvae_core::{GenerativeConfig, Matrix};

use crate::CliError;

pub const SPECTRAL_SLACK: f64 = 1e-12;
pub const GAIN_TOL: f64 = 1e-8;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const MC_SIGMAS: f64 = 4.0;
pub const MATCHING_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

pub struct VerifyOptions {
    pub seed: u64,
    pub mc_samples: usize,
    pub gradient_coords: usize,
    pub matching_instances: usize,
}

pub fn run(cfg: &GenerativeConfig, opts: &VerifyOptions) -> Result<Vec<Check>, CliError> {
    let dynamics = Dynamics::new(cfg.clone());
    let mut checks = Vec::new();

    let mut max_sigma_w = 0.0f64;
    let mut max_gain = 0.0f64;
    let mut gain_checks = 0;
    for (k, beta) in [1.0, 2.0, 4.0, 8.0].into_iter().enumerate() {
        let init = dynamics.random_init(derive_seed(opts.seed, &[0, k as u64]), 0.1)?;
        let run = dynamics.run_fixed_point(init, beta, 0.0, &FixedPointOptions::default())?;
        for &v in &run.diagnostics.sigma_w_spectral_norms {
            max_sigma_w = max_sigma_w.max(v);
        }
        for g in &run.diagnostics.gain_recursion_residuals {
            max_gain = max_gain.max(g.rel_error);
            gain_checks += 1;
        }
    }
    checks.push(Check {
        name: "spectral_bound",
        pass: max_sigma_w <= 1.0 + SPECTRAL_SLACK,
        detail: format!("max ‖Σ_W‖₂ over λ=0 runs at β∈{{1,2,4,8}}: {max_sigma_w:.15}"),
    });
    checks.push(Check {
        name: "gain_recursion",
        pass: max_gain <= GAIN_TOL,
        detail: format!("max relative error {max_gain:.2e} over {gain_checks} checkpoints (tol {GAIN_TOL:.0e})"),
    });

    let objective = Objective::from_sigma_y(dynamics.sigma_y().clone());
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (k, (beta, lambda)) in [(1.0, 0.0), (4.0, 8.0)].into_iter().enumerate() {
        let p = dynamics.random_init(derive_seed(opts.seed, &[1, k as u64]), 1.0)?;
        let g = gradient_check(
            &objective,
            &p,
            beta,
            lambda,
            1e-5,
            Some((opts.gradient_coords, derive_seed(opts.seed, &[2, k as u64]))),
        )?;
        worst = worst.max(g.rel_error);
        coords += g.coordinates;
    }
    checks.push(Check {
        name: "gradient",
        pass: worst <= GRADIENT_TOL,
        detail: format!("central differences on {coords} coordinates: max relative error {worst:.2e} (tol {GRADIENT_TOL:.0e})"),
    });

    let p = dynamics.random_init(derive_seed(opts.seed, &[3]), 1.0)?;
    let closed = objective.value(&p, 2.0, 4.0)?;
    let mc = monte_carlo_objective(cfg, &p, 2.0, 4.0, opts.mc_samples, derive_seed(opts.seed, &[4]))?;
    let z = [
        (closed.recon_nll - mc.recon_nll.mean).abs() / mc.recon_nll.se,
        (closed.kl - mc.kl.mean).abs() / mc.kl.se,
        (closed.l2_penalty - mc.l2_penalty.mean).abs() / mc.l2_penalty.se,
    ];
    let zmax = z.iter().copied().fold(0.0, f64::max);
    checks.push(Check {
        name: "monte_carlo",
        pass: zmax <= MC_SIGMAS,
        detail: format!(
            "{} samples: recon/kl/l2 deviations {:.2}/{:.2}/{:.2} SE (tol {MC_SIGMAS} SE)",
            opts.mc_samples, z[0], z[1], z[2]
        ),
    });

    let mut r = rng(derive_seed(opts.seed, &[5]));
    let mut bad = 0;
    for _ in 0..opts.matching_instances {
        let (rows, cols) = (r.random_range(1..=7), r.random_range(1..=7));
        let w = Matrix::from_fn(rows, cols, |_, _| r.random::<f64>());
        let got = max_weight_matching(&w)?.total;
        if (got - brute_force(&w)).abs() > MATCHING_TOL {
            bad += 1;
        }
    }
    checks.push(Check {
        name: "matching",
        pass: bad == 0,
        detail: format!(
            "Hungarian vs exhaustive search: {bad} of {} instances disagree",
            opts.matching_instances
        ),
    });
    Ok(checks)
}

fn brute_force(w: &Matrix) -> f64 {
    fn go(w: &Matrix, col: usize, used: &mut [bool]) -> f64 {
        if col == w.ncols() {
            return 0.0;
        }
        let mut best = go(w, col + 1, used);
        for row in 0..w.nrows() {
            if !used[row] {
                used[row] = true;
                best = best.max(w[(row, col)] + go(w, col + 1, used));
                used[row] = false;
            }
        }
        best
    }
    go(w, 0, &mut vec![false; w.nrows()])
}
