
use lbvae_core::select::*;
use lbvae_core::seed::rng;
use lbvae_core::sweep::*;
use lbvae_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn tiny_sweep() -> SweepConfig {
    SweepConfig {
        n: 6,
        m: 3,
        s: 2,
        beta_grid: vec![1.0, 4.0],
        lambda_grid: vec![0.0],
        trials: 3,
        procedures: vec![Procedure::FixedPoint, Procedure::Optimize],
        master_seed: 5,
        optimizer: lbvae_core::optim::OptimizerConfig {
            steps: 300,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn csv_bytes(records: &[SweepRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_records(records, &mut buf).unwrap();
    buf
}

#[test]
fn sweep_cardinality_and_order() {
    let sweep = tiny_sweep();
    let records = run_sweep(&sweep, 2).unwrap();
    assert_eq!(records.len(), 12);
    assert_eq!(sweep.cell_count(), 12);
    let keys: Vec<_> = records.iter().map(|r| (r.beta, r.lambda, r.trial, r.procedure)).collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(keys, sorted);
    for r in &records {
        assert!(r.recon_nll.is_some() && r.im.is_some(), "{r:?}");
    }
}

#[test]
fn sweep_output_independent_of_thread_count() {
    let sweep = SweepConfig {
        lambda_grid: vec![0.0, 4.0],
        ..tiny_sweep()
    };
    let one = csv_bytes(&run_sweep(&sweep, 1).unwrap());
    let three = csv_bytes(&run_sweep(&sweep, 3).unwrap());
    let again = csv_bytes(&run_sweep(&sweep, 1).unwrap());
    assert_eq!(one, three);
    assert_eq!(one, again);
}

#[test]
fn export_import_round_trip() {
    let records = run_sweep(&tiny_sweep(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.csv");
    export_records(&records, &path).unwrap();
    assert_eq!(import_records(&path).unwrap(), records);

    export_records(&[], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, format!("{}\n", CSV_HEADER.join(",")));
    assert!(import_records(&path).unwrap().is_empty());
}

#[test]
fn nan_in_required_column_names_the_line() {
    let mut text = String::from_utf8(csv_bytes(&run_sweep(&tiny_sweep(), 0).unwrap())).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut fields: Vec<String> = lines[3].split(',').map(str::to_string).collect();
    fields[0] = "NaN".into();
    let mut edited: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
    edited[3] = fields.join(",");
    text = edited.join("\n");
    match read_records(text.as_bytes()) {
        Err(Error::Record { line, message }) => {
            assert_eq!(line, 4);
            assert!(message.contains("beta"), "{message}");
        }
        other => panic!("expected a record error, got {other:?}"),
    }
}

#[test]
fn generative_configs_follow_the_protocol() {
    let sweep = SweepConfig::default();
    let a = sweep.generative_config(7).unwrap();
    assert_eq!(a, sweep.generative_config(7).unwrap());
    assert_ne!(a, sweep.generative_config(8).unwrap());
    assert_eq!((a.n(), a.m(), a.s(), a.sigma_sq()), (100, 10, 5, 0.05));

    let draws: Vec<f64> = (0..2000)
        .flat_map(|t| sample_generative_config(3, t, (2, 1, 5), (0.1, 1.0), 0.05).unwrap().sigma_v_diag().to_vec())
        .collect();
    assert_eq!(draws.len(), 10_000);
    assert!(draws.iter().all(|v| (0.1..=1.0).contains(v)));
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let se = (0.9f64.powi(2) / 12.0 / draws.len() as f64).sqrt();
    assert!((mean - 0.55).abs() <= 3.0 * se, "mean {mean} (SE {se})");
}

#[test]
fn aggregate_matches_recomputation_from_csv_text() {
    let sweep = SweepConfig {
        trials: 4,
        lambda_grid: vec![0.0, 4.0],
        ..tiny_sweep()
    };
    let records = run_sweep(&sweep, 0).unwrap();
    let text = String::from_utf8(csv_bytes(&records)).unwrap();
    let rows = aggregate(&records).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);

    // Parse the CSV by hand and recompute mean and median of `im`.
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for row in &rows {
        let mut vals: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|f| {
                f[col("beta")].parse::<f64>().unwrap() == row.beta
                    && f[col("lambda")].parse::<f64>().unwrap() == row.lambda
                    && f[col("procedure")] == row.procedure.as_str()
            })
            .filter_map(|f| f[col("im")].parse::<f64>().ok())
            .collect();
        vals.sort_by(f64::total_cmp);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let median = 0.5 * (vals[1] + vals[2]);
        let s = row.summary("im").unwrap();
        assert_eq!(s.count, 4);
        assert!((s.mean.unwrap() - mean).abs() <= 1e-15 * mean.abs().max(1e-300) + 1e-300);
        assert!((s.median.unwrap() - median).abs() <= 1e-15 * median.abs().max(1e-300) + 1e-300);
    }
}

#[test]
fn single_record_cells_have_equal_mean_and_median() {
    let records = run_sweep(&SweepConfig { trials: 1, ..tiny_sweep() }, 0).unwrap();
    for row in aggregate(&records).unwrap() {
        let s = row.summary("recon_nll").unwrap();
        assert_eq!(s.mean, s.median);
    }
}

fn random_grid(seed: u64, count: usize) -> ObjectiveGrid {
    let mut r = rng(seed);
    ObjectiveGrid {
        cells: (0..count)
            .map(|i| GridCell {
                beta: (i / 5 + 1) as f64,
                lambda: (i % 5) as f64,
                // Coarse values so that ties and dominated duplicates occur.
                f1: (r.random::<f64>() * 20.0).round(),
                f2: (r.random::<f64>() * 20.0).round() / 20.0,
            })
            .collect(),
        metric: F2Metric::Im,
    }
}

fn keys(cells: &[GridCell]) -> Vec<(f64, f64)> {
    let mut k: Vec<(f64, f64)> = cells.iter().map(|c| (c.beta, c.lambda)).collect();
    k.sort_by(|a, b| a.partial_cmp(b).unwrap());
    k
}

#[test]
fn pareto_front_matches_pairwise_oracle() {
    for seed in 0..50 {
        let grid = random_grid(seed, 50);
        let front = pareto_front(&grid).unwrap();
        let oracle = pareto_front_naive(&grid.cells);
        assert_eq!(keys(&front), keys(&oracle), "grid {seed}");
        // Independent check: no front member is dominated by any cell.
        for f in &front {
            assert!(!grid.cells.iter().any(|c| dominates(c, f)));
        }
    }
}

fn dominates(a: &GridCell, b: &GridCell) -> bool {
    a.f1 <= b.f1 && a.f2 <= b.f2 && (a.f1 < b.f1 || a.f2 < b.f2)
}

#[test]
fn selection_matches_exhaustive_scores_on_a_hand_grid() {
    let grid = ObjectiveGrid {
        cells: vec![
            GridCell { beta: 1.0, lambda: 0.0, f1: 10.0, f2: 0.9 },
            GridCell { beta: 4.0, lambda: 0.0, f1: 14.0, f2: 0.5 },
            GridCell { beta: 4.0, lambda: 8.0, f1: 12.0, f2: 0.2 },
            GridCell { beta: 32.0, lambda: 0.0, f1: 20.0, f2: 1.0 },
        ],
        metric: F2Metric::Mig,
    };
    let norm = normalize_objectives(&grid).unwrap();
    for w1 in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let w = (w1, 1.0 - w1);
        let sel = select_config(&norm, w, DEFAULT_RHO).unwrap();
        let ew = effective_weights(w).unwrap();
        let best = norm
            .cells
            .iter()
            .map(|c| {
                let score = (ew.0 * c.f1_norm).max(ew.1 * c.f2_norm) + DEFAULT_RHO * (ew.0 * c.f1_norm + ew.1 * c.f2_norm);
                (score, c.beta, c.lambda)
            })
            .min_by(|a, b| a.partial_cmp(b).unwrap())
            .unwrap();
        assert_eq!((sel.beta, sel.lambda), (best.1, best.2), "w1 = {w1}");
    }
    let fidelity = select_config(&norm, (1.0, 0.0), DEFAULT_RHO).unwrap();
    assert_eq!((fidelity.beta, fidelity.lambda), (1.0, 0.0));
}

#[test]
fn normalization_hand_cases() {
    let grid = ObjectiveGrid {
        cells: vec![
            GridCell { beta: 1.0, lambda: 0.0, f1: 2.0, f2: 0.3 },
            GridCell { beta: 2.0, lambda: 0.0, f1: 4.0, f2: 0.3 },
        ],
        metric: F2Metric::Mig,
    };
    let n = normalize_objectives(&grid).unwrap();
    assert_eq!([n.cells[0].f1_norm, n.cells[1].f1_norm], [0.0, 1.0]);
    assert!(n.cells.iter().all(|c| c.f2_norm == 0.0));
    assert_eq!(n.flags, vec![SelectFlag::ConstantObjective { index: 2 }]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selection_invariant_under_affine_maps(seed in any::<u64>(), w1 in 0.0f64..=1.0, a in 0.01f64..100.0, b in -50.0f64..50.0, which in 0usize..2) {
        let grid = random_grid(seed, 12);
        let mut mapped = grid.clone();
        for c in &mut mapped.cells {
            if which == 0 { c.f1 = a * c.f1 + b } else { c.f2 = a * c.f2 + b }
        }
        let base = normalize_objectives(&grid).unwrap();
        let other = normalize_objectives(&mapped).unwrap();
        for (x, y) in base.cells.iter().zip(&other.cells) {
            prop_assert!((x.f1_norm - y.f1_norm).abs() <= 1e-12);
            prop_assert!((x.f2_norm - y.f2_norm).abs() <= 1e-12);
        }
        let s0 = select_config(&base, (w1, 1.0 - w1), DEFAULT_RHO).unwrap();
        let s1 = select_config(&other, (w1, 1.0 - w1), DEFAULT_RHO).unwrap();
        prop_assert_eq!((s0.beta, s0.lambda), (s1.beta, s1.lambda));
    }

    #[test]
    fn selected_cell_is_pareto_optimal(seed in any::<u64>(), w1 in 0.0f64..=1.0, rho in 1e-6f64..0.1) {
        let grid = random_grid(seed, 20);
        let sel = select_config(&normalize_objectives(&grid).unwrap(), (w1, 1.0 - w1), rho).unwrap();
        let front = pareto_front(&grid).unwrap();
        prop_assert!(front.iter().any(|c| c.beta == sel.beta && c.lambda == sel.lambda));
        prop_assert!(sel.ranked[0].pareto);
    }

    #[test]
    fn score_matches_formula(f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0, w1 in 0.0f64..=1.0, rho in 0.0f64..1.0) {
        let w = (w1, 1.0 - w1);
        let ew = effective_weights(w).unwrap();
        let expected = (ew.0 * f1).max(ew.1 * f2) + rho * (ew.0 * f1 + ew.1 * f2);
        prop_assert_eq!(tchebycheff_score((f1, f2), w, rho).unwrap(), expected);
        prop_assert_eq!(tchebycheff_score((0.0, 0.0), w, rho).unwrap(), 0.0);
    }
}
