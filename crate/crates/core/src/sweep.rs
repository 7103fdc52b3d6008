//! Lambda x seed experiment grid: align, probe, evaluate, aggregate.
//!
//! Every cell is an independent task. Its RNG seed depends only on the
//! user seed and the lambda value (see [`cell_seed`]), so reports are
//! identical for any worker count and adding lambdas leaves existing cells
//! untouched.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::{PairedEmbeddingDataset, Split};
use crate::error::{GapError, Result};
use crate::geometry::{align, compute_gap, shift, AlignmentConfig, SplitSelector};
use crate::numeric::splitmix64;
use crate::probe::{evaluate_auc, train_probe, TrainConfig};
use crate::VERSION;

pub const SWEEP_SCHEMA: &str = "gapctl.sweep/v1";
const AGGREGATE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lambda_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambda_grid: (0..=10).map(|k| (k * 100) as f64 / 1000.0).collect(),
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
        }
    }
}

impl SweepConfig {
    /// Checks ranges and sorts the grid ascending.
    pub fn validated(mut self) -> Result<Self> {
        if self.lambda_grid.is_empty() {
            return Err(GapError::parameter("lambda_grid", "grid is empty"));
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(GapError::parameter("lambda", format!("{l} is outside [0, 1]")));
        }
        self.lambda_grid.sort_by(f64::total_cmp);
        if self.lambda_grid.windows(2).any(|w| lambda_index(w[0]) == lambda_index(w[1])) {
            return Err(GapError::parameter("lambda_grid", "grid values must be distinct at 3 decimals"));
        }
        if self.seeds.is_empty() {
            return Err(GapError::parameter("seeds", "no seeds given"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(GapError::parameter("seeds", "seeds must be distinct"));
        }
        self.train.validate()?;
        Ok(self)
    }
}

/// Lambda in thousandths; grids are materialized at that resolution.
pub fn lambda_index(lambda: f64) -> u64 {
    (lambda * 1000.0).round() as u64
}

/// `splitmix64(seed ^ splitmix64(round(1000 * lambda)))`.
pub fn cell_seed(user_seed: u64, lambda: f64) -> u64 {
    splitmix64(user_seed ^ splitmix64(lambda_index(lambda)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub lambda: f64,
    pub seed: u64,
    pub cell_seed: u64,
    pub overall_auc: Option<f64>,
    pub per_class_auc: Option<Vec<Option<f64>>>,
    pub excluded_classes: Option<Vec<usize>>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub error: Option<String>,
}

impl CellRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none() && self.overall_auc.is_some()
    }

    fn failed(lambda: f64, seed: u64, reason: String) -> Self {
        CellRecord {
            lambda,
            seed,
            cell_seed: cell_seed(seed, lambda),
            overall_auc: None,
            per_class_auc: None,
            excluded_classes: None,
            best_epoch: None,
            epochs_run: None,
            error: Some(reason),
        }
    }
}

/// Residual geometry of the aligned train split at one lambda.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGeometry {
    /// Centroid gap of the shifted embeddings before renormalization;
    /// equals `(1 - lambda) * |delta|` up to rounding.
    pub gap_norm: f64,
    /// Centroid gap after renormalization.
    pub aligned_gap_norm: Option<f64>,
    pub r_image: Option<f64>,
    pub r_text: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaAggregate {
    pub lambda: f64,
    pub mean_auc: Option<f64>,
    /// Sample standard deviation (n - 1); 0 for a single record.
    pub std_auc: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub geometry: LambdaGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub tool_version: String,
    pub dataset: String,
    pub backbone: String,
    pub delta_norm: f64,
    pub delta_split: String,
    pub evaluation_split: String,
    pub auc_aggregation: String,
    pub seed_scope: String,
    pub config: SweepConfig,
    pub complete: bool,
    pub records: Vec<CellRecord>,
    pub aggregates: Vec<LambdaAggregate>,
}

/// Arithmetic mean and sample standard deviation.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(GapError::parameter("records", "cannot aggregate zero records"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// Result of one aligned probe run.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell_seed: u64,
    pub auc: crate::probe::AucReport,
    pub history: crate::probe::TrainHistory,
}

/// Aligns with the train-split gap vector, trains one probe and scores it
/// on the test split. Shared by sweeps and standalone probe runs.
pub fn probe_cell(
    dataset: &PairedEmbeddingDataset,
    delta: &ndarray::Array1<f64>,
    lambda: f64,
    user_seed: u64,
    template: &TrainConfig,
) -> Result<CellOutcome> {
    let cfg = AlignmentConfig::new(lambda, delta.clone())?;
    let aligned = align(dataset, &cfg)?;
    let seed = cell_seed(user_seed, lambda);
    let train = TrainConfig {
        seed,
        ..template.clone()
    };
    let (model, history) = train_probe(&aligned, &train)?;
    let auc = evaluate_auc(&model, &aligned, Split::Test)?;
    Ok(CellOutcome {
        cell_seed: seed,
        auc,
        history,
    })
}

fn lambda_geometry(dataset: &PairedEmbeddingDataset, delta: &ndarray::Array1<f64>, lambda: f64) -> Result<LambdaGeometry> {
    let cfg = AlignmentConfig::new(lambda, delta.clone())?;
    let train_rows = dataset.split_indices(Split::Train);
    let shifted = shift(dataset, &cfg)?;
    let pre = shifted.centroid_gap(Some(&train_rows));
    let gap_norm = pre.dot(&pre).sqrt();
    Ok(match align(dataset, &cfg).and_then(|a| compute_gap(&a, SplitSelector::Train)) {
        Ok(g) => LambdaGeometry {
            gap_norm,
            aligned_gap_norm: Some(g.gap_norm),
            r_image: Some(g.r_image),
            r_text: Some(g.r_text),
        },
        Err(_) => LambdaGeometry {
            gap_norm,
            aligned_gap_norm: None,
            r_image: None,
            r_text: None,
        },
    })
}

/// Runs the full grid with `workers` threads. `dataset` must already have
/// unit rows. Cells that fail are recorded with their reason and the report
/// is marked incomplete.
pub fn run_sweep(dataset: &PairedEmbeddingDataset, config: SweepConfig, workers: usize) -> Result<SweepReport> {
    let config = config.validated()?;
    if workers == 0 {
        return Err(GapError::parameter("workers", "need at least one worker"));
    }
    let base = compute_gap(dataset, SplitSelector::Train)?;
    let delta = base.delta.clone();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| GapError::Config(format!("cannot start worker pool: {e}")))?;

    let cells: Vec<(f64, u64)> = config
        .lambda_grid
        .iter()
        .flat_map(|&l| config.seeds.iter().map(move |&s| (l, s)))
        .collect();

    let (geometries, mut records) = pool.install(|| {
        let geometries: Vec<Result<LambdaGeometry>> = config
            .lambda_grid
            .par_iter()
            .map(|&l| lambda_geometry(dataset, &delta, l))
            .collect();
        let records: Vec<CellRecord> = cells
            .par_iter()
            .map(|&(lambda, seed)| match probe_cell(dataset, &delta, lambda, seed, &config.train) {
                Ok(out) => CellRecord {
                    lambda,
                    seed,
                    cell_seed: out.cell_seed,
                    overall_auc: Some(out.auc.overall_auc),
                    per_class_auc: Some(out.auc.per_class_auc),
                    excluded_classes: Some(out.auc.excluded_classes),
                    best_epoch: Some(out.history.best_epoch),
                    epochs_run: Some(out.history.epochs_run),
                    error: None,
                },
                Err(e) => CellRecord::failed(lambda, seed, e.to_string()),
            })
            .collect();
        (geometries, records)
    });
    records.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.seed.cmp(&b.seed)));

    let geometries = geometries.into_iter().collect::<Result<Vec<_>>>()?;
    let aggregates = build_aggregates(&config.lambda_grid, &records, geometries)?;
    let complete = records.iter().all(CellRecord::is_ok);

    Ok(SweepReport {
        schema: SWEEP_SCHEMA.into(),
        tool_version: VERSION.into(),
        dataset: dataset.meta().name.clone(),
        backbone: dataset.meta().backbone.clone(),
        delta_norm: base.gap_norm,
        delta_split: "train".into(),
        evaluation_split: "test".into(),
        auc_aggregation: "macro".into(),
        seed_scope: "seeds drive minibatch shuffling and validation carving only; splits are fixed by the input file".into(),
        config,
        complete,
        records,
        aggregates,
    })
}

fn build_aggregates(
    grid: &[f64],
    records: &[CellRecord],
    geometries: Vec<LambdaGeometry>,
) -> Result<Vec<LambdaAggregate>> {
    grid.iter()
        .zip(geometries)
        .map(|(&lambda, geometry)| {
            let cell: Vec<&CellRecord> = records
                .iter()
                .filter(|r| lambda_index(r.lambda) == lambda_index(lambda))
                .collect();
            let aucs: Vec<f64> = cell.iter().filter_map(|r| r.overall_auc).collect();
            let (mean_auc, std_auc) = if aucs.is_empty() {
                (None, None)
            } else {
                let (m, s) = aggregate(&aucs)?;
                (Some(m), Some(s))
            };
            Ok(LambdaAggregate {
                lambda,
                mean_auc,
                std_auc,
                n_ok: aucs.len(),
                n_failed: cell.len() - aucs.len(),
                geometry,
            })
        })
        .collect()
}

impl SweepReport {
    /// Recomputes every aggregate from the stored records.
    pub fn reaggregate(&self) -> Result<Vec<LambdaAggregate>> {
        let geometries = self.aggregates.iter().map(|a| a.geometry.clone()).collect();
        let grid: Vec<f64> = self.aggregates.iter().map(|a| a.lambda).collect();
        build_aggregates(&grid, &self.records, geometries)
    }

    /// Checks that the stored aggregates follow from the stored records.
    pub fn verify(&self) -> Result<()> {
        if self.aggregates.len() != self.config.lambda_grid.len() {
            return Err(GapError::validation(
                "aggregates",
                format!("{} aggregates for a grid of {}", self.aggregates.len(), self.config.lambda_grid.len()),
            ));
        }
        let expected = self.reaggregate()?;
        for (stored, fresh) in self.aggregates.iter().zip(&expected) {
            let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(x), Some(y)) => (x - y).abs() <= AGGREGATE_TOLERANCE,
                (None, None) => true,
                _ => false,
            };
            if stored.n_ok + stored.n_failed != self.config.seeds.len()
                || stored.n_ok != fresh.n_ok
                || !close(stored.mean_auc, fresh.mean_auc)
                || !close(stored.std_auc, fresh.std_auc)
            {
                return Err(GapError::validation(
                    "aggregates",
                    format!("aggregate at lambda {} does not match its records", stored.lambda),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_aggregate() {
        assert_eq!(aggregate(&[0.8]).unwrap(), (0.8, 0.0));
    }

    #[test]
    fn two_point_aggregate() {
        let (m, s) = aggregate(&[0.7, 0.9]).unwrap();
        assert!((m - 0.8).abs() < 1e-15);
        assert!((s - 0.02f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_aggregate_errors() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn default_grid_is_exact_tenths() {
        let cfg = SweepConfig::default();
        assert_eq!(cfg.lambda_grid.len(), 11);
        assert_eq!(cfg.lambda_grid[1], 0.1);
        assert_eq!(cfg.lambda_grid[3], 0.3);
        assert_eq!(cfg.lambda_grid[10], 1.0);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn cell_seed_depends_on_lambda_value_not_position() {
        assert_eq!(cell_seed(3, 0.5), cell_seed(3, 0.5000001));
        assert_ne!(cell_seed(3, 0.5), cell_seed(3, 0.6));
        assert_ne!(cell_seed(3, 0.5), cell_seed(4, 0.5));
    }

    #[test]
    fn config_rejects_bad_grids() {
        let out_of_range = SweepConfig { lambda_grid: vec![0.0, 1.5], ..Default::default() };
        assert!(out_of_range.validated().is_err());
        let dup_seeds = SweepConfig { seeds: vec![1, 1], ..Default::default() };
        assert!(dup_seeds.validated().is_err());
        let dup_lambda = SweepConfig { lambda_grid: vec![0.1, 0.1], ..Default::default() };
        assert!(dup_lambda.validated().is_err());
        let empty = SweepConfig { lambda_grid: vec![], ..Default::default() };
        assert!(empty.validated().is_err());
    }
}
