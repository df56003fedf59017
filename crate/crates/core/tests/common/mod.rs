#![allow(dead_code)]

use lbvae_core::seed::rng;
use lbvae_core::sweep::sample_generative_config;
use lbvae_core::{GenerativeConfig, Matrix, ModelParams, SpdMatrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `G Gᵀ / dim + floor·I`, well conditioned for small dims.
pub fn random_spd(rng: &mut ChaCha8Rng, dim: usize, floor: f64) -> SpdMatrix {
    let g = gaussian(rng, dim, dim, 1.0);
    let mut m = &g * g.transpose() / dim as f64;
    for i in 0..dim {
        m[(i, i)] += floor;
    }
    SpdMatrix::symmetrized(m).unwrap()
}

pub fn protocol_like_cfg(seed: u64, n: usize, m: usize, s: usize) -> GenerativeConfig {
    sample_generative_config(seed, 0, (n, m, s), (0.1, 1.0), 0.05).unwrap()
}

/// Gains of order one and random SPD noise covariances.
pub fn random_params(cfg: &GenerativeConfig, seed: u64) -> ModelParams {
    let mut r = rng(seed);
    let (n, m) = (cfg.n(), cfg.m());
    let a = gaussian(&mut r, n, m, 1.0 / (m as f64).sqrt());
    let b = gaussian(&mut r, m, n, 1.0 / (n as f64).sqrt());
    let sz = random_spd(&mut r, n, 0.2);
    let sw = random_spd(&mut r, m, 0.2);
    ModelParams::new(a, b, sz, sw).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).amax()
}
