//! Full-size optimizer comparisons. Each AdamW run takes tens of seconds
//! at n = 100, so these are ignored by default; run them with
//! `cargo test -p lbvae-core --test optimizer_protocol -- --ignored --nocapture`.

use lbvae_core::metrics::evaluate_all;
use lbvae_core::optim::{optimize, OptimizerConfig};
use lbvae_core::stationarity::{Dynamics, FixedPointOptions};
use lbvae_core::sweep::SweepConfig;
use rayon::prelude::*;

#[test]
#[ignore]
fn positive_lambda_keeps_information_under_adamw() {
    let sweep = SweepConfig::default();
    let wins: Vec<bool> = (0..50usize)
        .into_par_iter()
        .map(|trial| {
            let cfg = sweep.generative_config(trial).unwrap();
            let d = Dynamics::new(cfg.clone());
            let init = d.random_init(trial as u64, sweep.init_scale).unwrap();
            let opt = OptimizerConfig {
                seed: trial as u64,
                ..Default::default()
            };
            let im = |lambda| {
                let run = optimize(&cfg, 4.0, lambda, &opt, &init).unwrap();
                evaluate_all(&cfg, &run.params).unwrap().im
            };
            let (base, restored) = (im(0.0), im(8.0));
            println!("trial {trial:2}: I_m λ=0 {base:.3e}  λ=8 {restored:.3e}");
            restored > base
        })
        .collect();
    let count = wins.iter().filter(|&&w| w).count();
    println!("λ=8 beats λ=0 on {count} of 50 matched seeds");
    assert!(count >= 45);
}

#[test]
#[ignore]
fn adamw_and_fixed_point_agree_at_beta_two() {
    let cfg = SweepConfig::default().generative_config(0).unwrap();
    let d = Dynamics::new(cfg.clone());
    let results: Vec<(f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let init = d.random_init(seed, 0.1).unwrap();
            let fp = d.run_fixed_point(init.clone(), 2.0, 0.0, &FixedPointOptions::default()).unwrap();
            let fp_total = lbvae_core::objective::objective_value(&cfg, &fp.state.params, 2.0, 0.0)
                .unwrap()
                .total;
            let opt = OptimizerConfig {
                seed,
                ..Default::default()
            };
            let adam_total = optimize(&cfg, 2.0, 0.0, &opt, &init).unwrap().objective.total;
            (fp_total, adam_total)
        })
        .collect();
    let best_fp = results.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let best_adam = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let rel = (best_adam - best_fp).abs() / best_fp.abs();
    println!("best fixed point {best_fp:.6}, best AdamW {best_adam:.6}, relative gap {rel:.3e}");
    assert!(rel <= 0.01);
}
