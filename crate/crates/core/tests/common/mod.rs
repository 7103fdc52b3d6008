#![allow(dead_code)]

use gapkit::embedstore::{l2_normalize, DatasetMeta, Labels, PairedEmbeddingDataset, Split};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal))
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    l2_normalize(gaussian(rng, n, d).view()).unwrap()
}

/// Rows cycle through train, train, train, val, test.
pub fn cyclic_splits(n: usize) -> Vec<Split> {
    (0..n)
        .map(|i| match i % 5 {
            3 => Split::Val,
            4 => Split::Test,
            _ => Split::Train,
        })
        .collect()
}

pub fn meta(name: &str) -> DatasetMeta {
    DatasetMeta {
        name: name.into(),
        backbone: "synthetic".into(),
        ..Default::default()
    }
}

/// Unit-norm dataset whose modalities sit in opposite half-spaces, so the
/// gap is far from zero. Multiclass labels cycle through the classes.
pub fn random_dataset(seed: u64, n: usize, d: usize, classes: usize) -> PairedEmbeddingDataset {
    let mut r = rng(seed);
    let mut image = gaussian(&mut r, n, d);
    let mut text = gaussian(&mut r, n, d);
    image.column_mut(0).mapv_inplace(|x| x + 2.0);
    text.column_mut(0).mapv_inplace(|x| x - 2.0);
    let labels = Labels::Multiclass((0..n).map(|i| (i % classes) as u32).collect());
    PairedEmbeddingDataset::new(
        l2_normalize(image.view()).unwrap(),
        l2_normalize(text.view()).unwrap(),
        labels,
        classes,
        cyclic_splits(n),
        meta("random"),
    )
    .unwrap()
}

pub fn random_multilabel(seed: u64, n: usize, d: usize, classes: usize) -> PairedEmbeddingDataset {
    let mut r = rng(seed);
    let image = unit_rows(&mut r, n, d);
    let text = unit_rows(&mut r, n, d);
    let y = Array2::from_shape_fn((n, classes), |(i, c)| u8::from((i + c) % 3 == 0 || r.random_bool(0.2)));
    PairedEmbeddingDataset::new(image, text, Labels::Multilabel(y), classes, cyclic_splits(n), meta("multilabel")).unwrap()
}

/// Binary task whose label depends on both modalities, with an injected
/// modality gap of norm 1 along the first axis (+0.5 on image rows, -0.5
/// on text rows, before normalization).
///
/// Clean latents are Gaussian with a stretched first axis and the label is
/// `[v.a + t.b + 0.1 eps > median]` with `a = e0 + e1`, `b = e0 + e2`, so
/// the shared axis carries signal that the gap offset distorts. Rows are
/// split 60/20/20 into train/val/test in order.
pub fn gapped_dataset(seed: u64, n: usize, d: usize) -> PairedEmbeddingDataset {
    assert!(d >= 3);
    let mut r = rng(seed);
    let clean = |r: &mut ChaCha8Rng| {
        let mut m = gaussian(r, n, d);
        m.column_mut(0).mapv_inplace(|x| 3.0 * x);
        l2_normalize(m.view()).unwrap()
    };
    let vc = clean(&mut r);
    let tc = clean(&mut r);
    let score: Vec<f64> = (0..n)
        .map(|i| {
            vc[[i, 0]] + vc[[i, 1]] + tc[[i, 0]] + tc[[i, 2]] + 0.1 * r.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let mut sorted = score.clone();
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[(n - 1) / 2] + sorted[n / 2]);
    let labels = Labels::Multiclass(score.iter().map(|&s| u32::from(s > median)).collect());

    let mut shift = Array1::zeros(d);
    shift[0] = 0.5;
    let image = l2_normalize((&vc + &shift).view()).unwrap();
    let text = l2_normalize((&tc - &shift).view()).unwrap();
    let (n_train, n_val) = (n * 6 / 10, n * 2 / 10);
    let splits = (0..n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    PairedEmbeddingDataset::new(image, text, labels, 2, splits, meta("gapped")).unwrap()
}
