mod common;

use gapkit::embedstore::{Labels, PairedEmbeddingDataset, Split};
use gapkit::geometry::{compute_gap, SplitSelector};
use gapkit::probe::TrainConfig;
use gapkit::sweep::{aggregate, cell_seed, probe_cell, run_sweep, SweepConfig, SweepReport, SWEEP_SCHEMA};

fn small(grid: Vec<f64>, seeds: Vec<u64>) -> SweepConfig {
    SweepConfig {
        lambda_grid: grid,
        seeds,
        train: TrainConfig {
            max_epochs: 30,
            ..Default::default()
        },
    }
}

#[test]
fn single_cell_statistics() {
    let ds = common::gapped_dataset(1, 300, 6);
    let report = run_sweep(&ds, small(vec![0.0], vec![0]), 1).unwrap();
    assert_eq!(report.records.len(), 1);
    let agg = &report.aggregates[0];
    assert_eq!(agg.mean_auc, report.records[0].overall_auc);
    assert_eq!(agg.std_auc, Some(0.0));
    assert_eq!(report.schema, SWEEP_SCHEMA);
    assert!(report.complete);
}

#[test]
fn record_and_aggregate_counts() {
    let ds = common::gapped_dataset(2, 300, 6);
    let report = run_sweep(&ds, small(vec![1.0, 0.0], (0..5).collect()), 2).unwrap();
    assert_eq!(report.records.len(), 10);
    assert_eq!(report.aggregates.len(), 2);
    assert_eq!(report.aggregates[0].lambda, 0.0);
    assert!(report.aggregates.iter().all(|a| a.n_ok == 5 && a.n_failed == 0));
    let order: Vec<(f64, u64)> = report.records.iter().map(|r| (r.lambda, r.seed)).collect();
    let mut sorted = order.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    assert_eq!(order, sorted);
}

#[test]
fn aggregate_formulas() {
    assert_eq!(aggregate(&[0.8]).unwrap(), (0.8, 0.0));
    let (m, s) = aggregate(&[0.7, 0.9]).unwrap();
    assert!((m - 0.8).abs() < 1e-15);
    assert!((s - 0.02f64.sqrt()).abs() < 1e-12);
    assert!(aggregate(&[]).is_err());

    let xs = [0.61, 0.72, 0.55, 0.93, 0.68];
    let mean = xs.iter().sum::<f64>() / 5.0;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
    let (m, s) = aggregate(&xs).unwrap();
    assert!((m - mean).abs() < 1e-12 && (s - var.sqrt()).abs() < 1e-12);
}

#[test]
fn sweep_cells_match_standalone_runs() {
    let ds = common::gapped_dataset(3, 300, 6);
    let cfg = small(vec![0.0, 0.4], vec![3, 8]);
    let report = run_sweep(&ds, cfg.clone(), 3).unwrap();
    let delta = compute_gap(&ds, SplitSelector::Train).unwrap().delta;
    for rec in &report.records {
        let solo = probe_cell(&ds, &delta, rec.lambda, rec.seed, &cfg.train).unwrap();
        assert_eq!(rec.cell_seed, cell_seed(rec.seed, rec.lambda));
        assert_eq!(solo.cell_seed, rec.cell_seed);
        assert_eq!(Some(solo.auc.overall_auc), rec.overall_auc);
        assert_eq!(Some(solo.history.best_epoch), rec.best_epoch);
    }
}

#[test]
fn adding_lambdas_keeps_existing_cells() {
    let ds = common::gapped_dataset(4, 300, 6);
    let a = run_sweep(&ds, small(vec![0.0, 0.5], vec![0, 1]), 1).unwrap();
    let b = run_sweep(&ds, small(vec![0.0, 0.25, 0.5], vec![0, 1]), 1).unwrap();
    for rec in &a.records {
        let twin = b.records.iter().find(|r| r.lambda == rec.lambda && r.seed == rec.seed).unwrap();
        assert_eq!(rec, twin);
    }
}

#[test]
fn report_round_trips_and_verifies() {
    let ds = common::gapped_dataset(5, 300, 6);
    let report = run_sweep(&ds, small(vec![0.0, 0.5, 1.0], vec![0, 1, 2]), 2).unwrap();
    let json = serde_json::to_string(&report).unwrap();
    let back: SweepReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    back.verify().unwrap();
    assert_eq!(back.reaggregate().unwrap(), report.aggregates);

    let mut tampered = back.clone();
    tampered.records[0].overall_auc = Some(0.123);
    assert!(tampered.verify().is_err());
}

#[test]
fn geometry_per_lambda() {
    let ds = common::gapped_dataset(6, 300, 6);
    let report = run_sweep(&ds, small(vec![0.0, 0.5, 1.0], vec![0]), 1).unwrap();
    let g0 = compute_gap(&ds, SplitSelector::Train).unwrap();
    let geo: Vec<_> = report.aggregates.iter().map(|a| &a.geometry).collect();
    assert!((geo[0].gap_norm - g0.gap_norm).abs() < 1e-12);
    assert!((geo[1].gap_norm - 0.5 * g0.gap_norm).abs() < 1e-12);
    assert!(geo[2].gap_norm < 1e-12);
    assert!((geo[0].r_image.unwrap() - g0.r_image).abs() < 1e-9);
    let aligned: Vec<f64> = geo.iter().map(|g| g.aligned_gap_norm.unwrap()).collect();
    assert!(aligned[0] > aligned[1] && aligned[1] > aligned[2], "{aligned:?}");
    assert_eq!(report.delta_norm, g0.gap_norm);
}

#[test]
fn failing_cells_are_recorded_and_sweep_continues() {
    // Test split holds a single class, so every cell fails at evaluation.
    let base = common::gapped_dataset(7, 100, 4);
    let y: Vec<u32> = base
        .splits()
        .iter()
        .enumerate()
        .map(|(i, &s)| if s == Split::Test { 0 } else { (i % 2) as u32 })
        .collect();
    let ds = PairedEmbeddingDataset::new(
        base.image().to_owned(),
        base.text().to_owned(),
        Labels::Multiclass(y),
        2,
        base.splits().to_vec(),
        base.meta().clone(),
    )
    .unwrap();
    let report = run_sweep(&ds, small(vec![0.0, 1.0], vec![0, 1]), 2).unwrap();
    assert!(!report.complete);
    assert_eq!(report.records.len(), 4);
    assert!(report.records.iter().all(|r| r.error.is_some() && r.overall_auc.is_none()));
    assert!(report.aggregates.iter().all(|a| a.n_failed == 2 && a.mean_auc.is_none()));
}

#[test]
fn invalid_configs_rejected() {
    let ds = common::gapped_dataset(8, 100, 4);
    for cfg in [
        small(vec![], vec![0]),
        small(vec![1.5], vec![0]),
        small(vec![0.1, 0.1], vec![0]),
        small(vec![0.1], vec![]),
        small(vec![0.1], vec![2, 2]),
    ] {
        assert!(run_sweep(&ds, cfg, 1).unwrap_err().is_validation());
    }
    assert!(run_sweep(&ds, small(vec![0.0], vec![0]), 0).is_err());
}

#[test]
fn cell_seed_ignores_grid_position() {
    assert_eq!(cell_seed(4, 0.3), cell_seed(4, 0.30000000000000004));
    assert_ne!(cell_seed(4, 0.3), cell_seed(4, 0.4));
    assert_ne!(cell_seed(4, 0.3), cell_seed(5, 0.3));
}
