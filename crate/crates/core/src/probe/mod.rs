//! Early-fusion linear probe: a single affine layer over `[image; text]`
//! trained with class-weighted cross-entropy and momentum SGD.

mod auc;

pub use auc::{roc_auc, AucReport};

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedstore::{Labels, PairedEmbeddingDataset, Split, TaskKind};
use crate::error::{GapError, Result};

const MIN_CLASS_WEIGHT: f64 = 0.1;
const MAX_CLASS_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// C x 2d.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub task_kind: TaskKind,
}

impl ProbeModel {
    pub fn zeros(class_count: usize, feature_dim: usize, task_kind: TaskKind) -> Self {
        ProbeModel {
            weights: Array2::zeros((class_count, feature_dim)),
            bias: Array1::zeros(class_count),
            task_kind,
        }
    }

    pub fn class_count(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Fraction of train rows held out for validation when the dataset has
    /// no val split.
    pub val_fraction: f64,
    /// Apply class weights to the multiclass cross-entropy as well.
    pub weighted_multiclass: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            momentum: 0.9,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            val_fraction: 0.1,
            weighted_multiclass: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GapError::parameter("learning_rate", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GapError::parameter("momentum", "must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(GapError::parameter("batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(GapError::parameter("max_epochs", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(GapError::parameter("patience", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(GapError::parameter("val_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub train_rows: usize,
    pub val_rows: usize,
    /// True when validation rows were carved from the train split.
    pub val_carved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_weights: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

/// `[image; text]`.
pub fn fuse(image: ArrayView1<'_, f64>, text: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if image.len() != text.len() {
        return Err(GapError::parameter(
            "fuse",
            format!("image has {} entries, text has {}", image.len(), text.len()),
        ));
    }
    Ok(concatenate(Axis(0), &[image, text]).expect("1-d concatenation"))
}

/// Fused features for every row of the dataset, N x 2d.
pub fn fused_features(dataset: &PairedEmbeddingDataset) -> Array2<f64> {
    concatenate(Axis(1), &[dataset.image(), dataset.text()]).expect("equal row counts")
}

/// Logits `W x + b`, no activation.
pub fn forward(model: &ProbeModel, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if x.len() != model.feature_dim() {
        return Err(GapError::parameter(
            "features",
            format!("expected {} features, got {}", model.feature_dim(), x.len()),
        ));
    }
    Ok(model.weights.dot(&x) + &model.bias)
}

/// Logits for every row of `x`, n x C.
pub fn forward_batch(model: &ProbeModel, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.feature_dim() {
        return Err(GapError::parameter(
            "features",
            format!("expected {} features, got {}", model.feature_dim(), x.ncols()),
        ));
    }
    Ok(x.dot(&model.weights.t()) + model.bias.view().insert_axis(Axis(0)))
}

/// Inverse-frequency weights `n / (C * count_c)` over `rows`, clamped to
/// [0.1, 10]. Classes with no positives get the upper clamp.
pub fn class_weights(labels: &Labels, class_count: usize, rows: &[usize]) -> Vec<f64> {
    let mut counts = vec![0usize; class_count];
    match labels {
        Labels::Multiclass(y) => rows.iter().for_each(|&i| counts[y[i] as usize] += 1),
        Labels::Multilabel(m) => {
            for &i in rows {
                for (c, &v) in m.row(i).iter().enumerate() {
                    counts[c] += v as usize;
                }
            }
        }
    }
    let n = rows.len() as f64;
    counts
        .iter()
        .map(|&k| {
            if k == 0 {
                MAX_CLASS_WEIGHT
            } else {
                (n / (class_count as f64 * k as f64)).clamp(MIN_CLASS_WEIGHT, MAX_CLASS_WEIGHT)
            }
        })
        .collect()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(z: ArrayView1<'_, f64>) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn check_batch(model: &ProbeModel, x: ArrayView2<'_, f64>, labels: &Labels, class_weights: &[f64]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(GapError::parameter("batch", "batch is empty"));
    }
    if labels.task_kind() != model.task_kind {
        return Err(GapError::parameter("labels", "task kind differs from the model's"));
    }
    let n_labels = match labels {
        Labels::Multiclass(y) => y.len(),
        Labels::Multilabel(m) => m.nrows(),
    };
    if n_labels != x.nrows() {
        return Err(GapError::parameter("labels", "label count differs from batch size"));
    }
    if class_weights.len() != model.class_count() || class_weights.iter().any(|&w| !(w > 0.0)) {
        return Err(GapError::parameter("class_weights", "need one positive weight per class"));
    }
    Ok(())
}

/// Weighted loss and, when `with_grad`, its exact gradient.
///
/// Multilabel: mean over samples and labels of `w_c * BCE(sigmoid(z), y)`.
/// Multiclass: mean over samples of `w_y * CE(softmax(z), y)`.
fn loss_impl(
    model: &ProbeModel,
    x: ArrayView2<'_, f64>,
    labels: &Labels,
    class_weights: &[f64],
    with_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    check_batch(model, x, labels, class_weights)?;
    let logits = forward_batch(model, x)?;
    if let Some(pos) = logits.iter().position(|z| !z.is_finite()) {
        return Err(GapError::NonFinite {
            context: "logits, batch sample".into(),
            index: pos / model.class_count(),
        });
    }
    let (n, c) = logits.dim();
    let mut dlogits = with_grad.then(|| Array2::<f64>::zeros((n, c)));
    let mut total = 0.0;
    match labels {
        Labels::Multilabel(y) => {
            let scale = 1.0 / (n * c) as f64;
            for i in 0..n {
                for k in 0..c {
                    let z = logits[[i, k]];
                    let t = y[[i, k]] as f64;
                    total += class_weights[k] * (softplus(z) - t * z);
                    if let Some(g) = dlogits.as_mut() {
                        g[[i, k]] = class_weights[k] * (sigmoid(z) - t) * scale;
                    }
                }
            }
            total *= scale;
        }
        Labels::Multiclass(y) => {
            let scale = 1.0 / n as f64;
            for i in 0..n {
                let row = logits.row(i);
                let target = y[i] as usize;
                let w = class_weights[target];
                let lse = log_sum_exp(row);
                total += w * (lse - row[target]);
                if let Some(g) = dlogits.as_mut() {
                    for k in 0..c {
                        let p = (row[k] - lse).exp();
                        let onehot = if k == target { 1.0 } else { 0.0 };
                        g[[i, k]] = w * (p - onehot) * scale;
                    }
                }
            }
            total *= scale;
        }
    }
    Ok((total, dlogits))
}

pub fn loss(model: &ProbeModel, x: ArrayView2<'_, f64>, labels: &Labels, class_weights: &[f64]) -> Result<f64> {
    loss_impl(model, x, labels, class_weights, false).map(|(l, _)| l)
}

pub fn loss_and_grad(
    model: &ProbeModel,
    x: ArrayView2<'_, f64>,
    labels: &Labels,
    class_weights: &[f64],
) -> Result<LossGrad> {
    let (loss, dlogits) = loss_impl(model, x, labels, class_weights, true)?;
    let dlogits = dlogits.expect("gradient requested");
    Ok(LossGrad {
        loss,
        grad_weights: dlogits.t().dot(&x),
        grad_bias: dlogits.sum_axis(Axis(0)),
    })
}

fn select_labels(labels: &Labels, rows: &[usize]) -> Labels {
    match labels {
        Labels::Multiclass(y) => Labels::Multiclass(rows.iter().map(|&i| y[i]).collect()),
        Labels::Multilabel(m) => Labels::Multilabel(m.select(Axis(0), rows)),
    }
}

/// Trains a probe on the train split of an (already aligned) dataset and
/// returns the parameters from the epoch with the lowest validation loss.
///
/// The seed drives minibatch order and, when the dataset has no val split,
/// which train rows are held out. Parameters start at zero.
pub fn train_probe(dataset: &PairedEmbeddingDataset, config: &TrainConfig) -> Result<(ProbeModel, TrainHistory)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut train_rows = dataset.split_indices(Split::Train);
    let mut val_rows = dataset.split_indices(Split::Val);
    let val_carved = val_rows.is_empty();
    if val_carved {
        if config.val_fraction <= 0.0 {
            return Err(GapError::Config(
                "dataset has no val split and val_fraction is 0".into(),
            ));
        }
        let n_val = (config.val_fraction * train_rows.len() as f64).ceil() as usize;
        if n_val == 0 || n_val >= train_rows.len() {
            return Err(GapError::Config(format!(
                "cannot carve a validation set from {} train rows with val_fraction {}",
                train_rows.len(),
                config.val_fraction
            )));
        }
        train_rows.shuffle(&mut rng);
        val_rows = train_rows.split_off(train_rows.len() - n_val);
        train_rows.sort_unstable();
        val_rows.sort_unstable();
    }

    let c = dataset.class_count();
    let weights = match dataset.task_kind() {
        TaskKind::Multiclass if !config.weighted_multiclass => vec![1.0; c],
        _ => class_weights(dataset.labels(), c, &train_rows),
    };

    let features = fused_features(dataset);
    let x_train = features.select(Axis(0), &train_rows);
    let y_train = select_labels(dataset.labels(), &train_rows);
    let x_val = features.select(Axis(0), &val_rows);
    let y_val = select_labels(dataset.labels(), &val_rows);

    let mut model = ProbeModel::zeros(c, features.ncols(), dataset.task_kind());
    let mut vel_w = Array2::<f64>::zeros(model.weights.dim());
    let mut vel_b = Array1::<f64>::zeros(c);

    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
        stopped_early: false,
        train_rows: train_rows.len(),
        val_rows: val_rows.len(),
        val_carved,
    };
    let mut best_val = f64::INFINITY;
    let mut best_model = model.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_rows.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xb = x_train.select(Axis(0), batch);
            let yb = select_labels(&y_train, batch);
            let g = loss_and_grad(&model, xb.view(), &yb, &weights)?;
            vel_w *= config.momentum;
            vel_w.scaled_add(-config.learning_rate, &g.grad_weights);
            vel_b *= config.momentum;
            vel_b.scaled_add(-config.learning_rate, &g.grad_bias);
            model.weights += &vel_w;
            model.bias += &vel_b;
        }
        let train_loss = loss(&model, x_train.view(), &y_train, &weights)?;
        let val_loss = loss(&model, x_val.view(), &y_val, &weights)?;
        if !val_loss.is_finite() {
            return Err(GapError::NonFinite {
                context: "validation loss, epoch".into(),
                index: epoch,
            });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.epochs_run = epoch;
        if val_loss < best_val {
            best_val = val_loss;
            best_model = model.clone();
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((best_model, history))
}

/// Class scores used for ranking: softmax probabilities (one-vs-rest) for
/// multiclass, per-label sigmoid probabilities for multilabel.
pub fn predict_scores(model: &ProbeModel, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut logits = forward_batch(model, x)?;
    match model.task_kind {
        TaskKind::Multilabel => logits.mapv_inplace(sigmoid),
        TaskKind::Multiclass => {
            for mut row in logits.rows_mut() {
                let lse = log_sum_exp(row.view());
                row.mapv_inplace(|z| (z - lse).exp());
            }
        }
    }
    Ok(logits)
}

/// Per-class one-vs-rest AUC on `split`, macro-averaged. Classes without
/// both positives and negatives are excluded and listed.
pub fn evaluate_auc(model: &ProbeModel, dataset: &PairedEmbeddingDataset, split: Split) -> Result<AucReport> {
    let rows = dataset.split_indices(split);
    if rows.is_empty() {
        return Err(GapError::EmptySplit(split.name().into()));
    }
    if model.class_count() != dataset.class_count() || model.task_kind != dataset.task_kind() {
        return Err(GapError::parameter("model", "model does not match the dataset's label space"));
    }
    let features = fused_features(dataset).select(Axis(0), &rows);
    let scores = predict_scores(model, features.view())?;
    let per_class = (0..dataset.class_count())
        .map(|c| {
            let positive: Vec<bool> = match dataset.labels() {
                Labels::Multiclass(y) => rows.iter().map(|&i| y[i] as usize == c).collect(),
                Labels::Multilabel(m) => rows.iter().map(|&i| m[[i, c]] == 1).collect(),
            };
            let col = scores.slice(s![.., c]).to_vec();
            roc_auc(&col, &positive)
        })
        .collect();
    AucReport::from_per_class(per_class).ok_or_else(|| {
        GapError::Evaluation(format!(
            "no class has both positive and negative examples in the {split} split"
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fuse_orders_image_first() {
        let f = fuse(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap();
        assert_eq!(f.to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
        let g = fuse(array![0.0, 1.0].view(), array![1.0, 0.0].view()).unwrap();
        assert_ne!(f, g);
        assert_eq!(f.slice(s![..2]), array![1.0, 0.0]);
        assert_eq!(f.slice(s![2..]), array![0.0, 1.0]);
    }

    #[test]
    fn fuse_dimension_mismatch() {
        assert!(fuse(array![1.0, 0.0].view(), array![1.0].view()).is_err());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = ProbeModel::zeros(3, 4, TaskKind::Multiclass);
        let z = forward(&m, array![1.0, 2.0, 3.0, 4.0].view()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn basis_vector_selects_column() {
        let mut m = ProbeModel::zeros(2, 3, TaskKind::Multiclass);
        m.weights = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let z = forward(&m, array![0.0, 1.0, 0.0].view()).unwrap();
        assert_eq!(z.to_vec(), vec![2.0, 5.0]);
        assert!(forward(&m, array![1.0, 0.0].view()).is_err());
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let m = ProbeModel::zeros(2, 2, TaskKind::Multilabel);
        let x = array![[0.3, -0.1]];
        let y = Labels::Multilabel(array![[1u8, 1]]);
        let l = loss(&m, x.view(), &y, &[1.0, 1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_multiclass_loss_vanishes() {
        let mut m = ProbeModel::zeros(3, 1, TaskKind::Multiclass);
        m.bias = array![0.0, 800.0, 0.0];
        let l = loss(&m, array![[0.0]].view(), &Labels::Multiclass(vec![1]), &[1.0; 3]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn non_finite_logit_reports_sample() {
        let mut m = ProbeModel::zeros(1, 1, TaskKind::Multilabel);
        m.weights[[0, 0]] = f64::INFINITY;
        let x = array![[0.0], [1.0]];
        let y = Labels::Multilabel(array![[0u8], [1]]);
        match loss(&m, x.view(), &y, &[1.0]) {
            Err(GapError::NonFinite { index, .. }) => assert_eq!(index, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inverse_frequency_weights() {
        let y = Labels::Multiclass(vec![0, 0, 0, 1]);
        let w = class_weights(&y, 3, &[0, 1, 2, 3]);
        assert!((w[0] - 4.0 / 9.0).abs() < 1e-15);
        assert!((w[1] - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(w[2], 10.0);
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        TrainConfig::default().validate().unwrap();
    }
}
