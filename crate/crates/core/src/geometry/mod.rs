//! Embedding-space geometry: modality centroids and gap vector, mean
//! resultant length, the lambda-alignment shift, and PCA projections.

mod pca;

pub use pca::{fit_pca, participation_ratio, pca_project, Pca, PcaProjection};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::embedstore::{PairedEmbeddingDataset, Split};
use crate::error::{GapError, Result};
use crate::numeric::column_means;

/// Rows must have unit norm within this tolerance to count as on the sphere.
pub const UNIT_TOLERANCE: f64 = 1e-6;
const DEGENERATE_SHIFT_NORM: f64 = 1e-9;

/// Which rows of a dataset a geometric summary is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSelector {
    Train,
    Val,
    Test,
    All,
}

impl SplitSelector {
    pub fn rows(self, dataset: &PairedEmbeddingDataset) -> Vec<usize> {
        match self.split() {
            Some(s) => dataset.split_indices(s),
            None => (0..dataset.len()).collect(),
        }
    }

    fn split(self) -> Option<Split> {
        match self {
            SplitSelector::Train => Some(Split::Train),
            SplitSelector::Val => Some(Split::Val),
            SplitSelector::Test => Some(Split::Test),
            SplitSelector::All => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitSelector::Train => "train",
            SplitSelector::Val => "val",
            SplitSelector::Test => "test",
            SplitSelector::All => "all",
        }
    }
}

impl From<Split> for SplitSelector {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitSelector::Train,
            Split::Val => SplitSelector::Val,
            Split::Test => SplitSelector::Test,
        }
    }
}

impl fmt::Display for SplitSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitSelector {
    type Err = GapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SplitSelector::All),
            other => other.parse::<Split>().map(Into::into).map_err(|_| {
                GapError::parameter("split", format!("expected train, val, test or all, got `{other}`"))
            }),
        }
    }
}

/// Centroids, gap vector and per-modality concentration over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct GapGeometry {
    pub split: SplitSelector,
    pub mu_image: Array1<f64>,
    pub mu_text: Array1<f64>,
    /// `mu_image - mu_text`.
    pub delta: Array1<f64>,
    pub gap_norm: f64,
    pub r_image: f64,
    pub r_text: f64,
    pub n_samples: usize,
}

impl GapGeometry {
    pub fn mu_image_norm(&self) -> f64 {
        self.mu_image.dot(&self.mu_image).sqrt()
    }

    pub fn mu_text_norm(&self) -> f64 {
        self.mu_text.dot(&self.mu_text).sqrt()
    }
}

pub(crate) fn check_unit_rows(rows: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    for (i, row) in rows.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(GapError::Precondition(format!(
                "{what} row {i} has norm {norm}, expected a unit vector"
            )));
        }
    }
    Ok(())
}

/// Norm of the mean of unit vectors: 0 for rows that cancel, 1 when all
/// rows point the same way.
pub fn mean_resultant_length(rows: ArrayView2<'_, f64>) -> Result<f64> {
    if rows.nrows() == 0 {
        return Err(GapError::Precondition("mean resultant length of zero rows".into()));
    }
    check_unit_rows(rows, "embedding")?;
    let mu = column_means(rows, None);
    Ok(mu.dot(&mu).sqrt())
}

/// Centroid gap statistics over the rows chosen by `split`.
pub fn compute_gap(dataset: &PairedEmbeddingDataset, split: SplitSelector) -> Result<GapGeometry> {
    let rows = split.rows(dataset);
    if rows.is_empty() {
        return Err(GapError::EmptySplit(split.name().into()));
    }
    let image = dataset.image().select(ndarray::Axis(0), &rows);
    let text = dataset.text().select(ndarray::Axis(0), &rows);
    check_unit_rows(image.view(), "image")?;
    check_unit_rows(text.view(), "text")?;
    let mu_image = column_means(image.view(), None);
    let mu_text = column_means(text.view(), None);
    let delta = &mu_image - &mu_text;
    Ok(GapGeometry {
        split,
        gap_norm: delta.dot(&delta).sqrt(),
        r_image: mu_image.dot(&mu_image).sqrt(),
        r_text: mu_text.dot(&mu_text).sqrt(),
        n_samples: rows.len(),
        mu_image,
        mu_text,
        delta,
    })
}

/// Alignment strength and the gap vector it is applied with.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    lambda: f64,
    delta: Array1<f64>,
}

impl AlignmentConfig {
    pub fn new(lambda: f64, delta: Array1<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(GapError::parameter("lambda", format!("{lambda} is outside [0, 1]")));
        }
        if delta.iter().any(|x| !x.is_finite()) {
            return Err(GapError::parameter("delta", "gap vector has non-finite entries"));
        }
        Ok(AlignmentConfig { lambda, delta })
    }

    /// Uses the gap vector estimated on the train split; the same vector is
    /// then applied to every split.
    pub fn from_train(dataset: &PairedEmbeddingDataset, lambda: f64) -> Result<Self> {
        let geom = compute_gap(dataset, SplitSelector::Train)?;
        AlignmentConfig::new(lambda, geom.delta)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn delta(&self) -> &Array1<f64> {
        &self.delta
    }
}

/// Embeddings after the shift but before renormalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedEmbeddings {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
}

impl ShiftedEmbeddings {
    /// Centroid difference over `rows` (all rows when `None`).
    pub fn centroid_gap(&self, rows: Option<&[usize]>) -> Array1<f64> {
        column_means(self.image.view(), rows) - column_means(self.text.view(), rows)
    }
}

/// Moves image rows by `-lambda/2 * delta` and text rows by `+lambda/2 * delta`.
pub fn shift(dataset: &PairedEmbeddingDataset, config: &AlignmentConfig) -> Result<ShiftedEmbeddings> {
    if config.delta.len() != dataset.dim() {
        return Err(GapError::parameter(
            "delta",
            format!("gap vector has {} entries, dataset dim is {}", config.delta.len(), dataset.dim()),
        ));
    }
    check_unit_rows(dataset.image(), "image")?;
    check_unit_rows(dataset.text(), "text")?;
    let half = config.delta.mapv(|x| 0.5 * config.lambda * x);
    let mut image = dataset.image().to_owned();
    let mut text = dataset.text().to_owned();
    for mut row in image.rows_mut() {
        Zip::from(&mut row).and(&half).for_each(|a, &h| *a -= h);
    }
    for mut row in text.rows_mut() {
        Zip::from(&mut row).and(&half).for_each(|a, &h| *a += h);
    }
    Ok(ShiftedEmbeddings { image, text })
}

/// Shifts both modalities toward each other along the gap vector and maps
/// them back onto the sphere. Labels, splits and row order are unchanged.
pub fn align(dataset: &PairedEmbeddingDataset, config: &AlignmentConfig) -> Result<PairedEmbeddingDataset> {
    let shifted = shift(dataset, config)?;
    let image = renormalize(shifted.image, "image", config.lambda)?;
    let text = renormalize(shifted.text, "text", config.lambda)?;
    dataset.with_embeddings(image, text)
}

fn renormalize(mut m: Array2<f64>, modality: &'static str, lambda: f64) -> Result<Array2<f64>> {
    for (row_idx, mut row) in m.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm >= DEGENERATE_SHIFT_NORM) {
            return Err(GapError::DegenerateAlignment {
                row: row_idx,
                modality,
                lambda,
                norm,
            });
        }
        row.mapv_inplace(|x| x / norm);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::{DatasetMeta, Labels};
    use ndarray::array;

    fn dataset(image: Array2<f64>, text: Array2<f64>) -> PairedEmbeddingDataset {
        let n = image.nrows();
        PairedEmbeddingDataset::new(
            image,
            text,
            Labels::Multiclass(vec![0; n]),
            1,
            vec![Split::Train; n],
            DatasetMeta::default(),
        )
        .unwrap()
    }

    #[test]
    fn identical_modalities_have_no_gap() {
        let x = array![[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]];
        let g = compute_gap(&dataset(x.clone(), x), SplitSelector::Train).unwrap();
        assert!(g.delta.iter().all(|&v| v == 0.0));
        assert_eq!(g.gap_norm, 0.0);
    }

    #[test]
    fn single_pair() {
        let v = array![[0.6, 0.8]];
        let t = array![[1.0, 0.0]];
        let g = compute_gap(&dataset(v, t), SplitSelector::All).unwrap();
        assert!((g.delta[0] + 0.4).abs() < 1e-15 && (g.delta[1] - 0.8).abs() < 1e-15);
        assert!((g.r_image - 1.0).abs() < 1e-12 && (g.r_text - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_hand_pairs() {
        let s = 0.5f64.sqrt();
        let v = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [s, s, 0.0]];
        let t = array![[0.0, 0.0, 1.0], [0.0, s, s], [0.6, 0.0, 0.8]];
        let g = compute_gap(&dataset(v, t), SplitSelector::Train).unwrap();
        // mu_v = ((1+s)/3, (1+s)/3, 0), mu_t = (0.6/3, s/3, (1+s+0.8)/3)
        let expect = [
            (1.0 + s) / 3.0 - 0.2,
            (1.0 + s) / 3.0 - s / 3.0,
            -(1.8 + s) / 3.0,
        ];
        for (a, b) in g.delta.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let norm = expect.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((g.gap_norm - norm).abs() < 1e-9);
    }

    #[test]
    fn empty_split_is_named() {
        let x = array![[1.0, 0.0]];
        match compute_gap(&dataset(x.clone(), x), SplitSelector::Test) {
            Err(GapError::EmptySplit(s)) => assert_eq!(s, "test"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn r_extremes() {
        let same = array![[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]];
        assert!((mean_resultant_length(same.view()).unwrap() - 1.0).abs() < 1e-9);
        let anti = array![[0.6, 0.8], [-0.6, -0.8]];
        assert!(mean_resultant_length(anti.view()).unwrap().abs() < 1e-9);
    }

    #[test]
    fn r_rejects_non_unit_rows() {
        let x = array![[1.0, 1.0]];
        assert!(matches!(mean_resultant_length(x.view()), Err(GapError::Precondition(_))));
    }

    #[test]
    fn lambda_out_of_range() {
        assert!(AlignmentConfig::new(1.5, array![0.0, 0.0]).is_err());
        assert!(AlignmentConfig::new(-0.1, array![0.0, 0.0]).is_err());
    }

    #[test]
    fn lambda_zero_is_identity() {
        let v = array![[0.6, 0.8], [1.0, 0.0]];
        let t = array![[0.0, 1.0], [-0.8, 0.6]];
        let ds = dataset(v, t);
        let cfg = AlignmentConfig::from_train(&ds, 0.0).unwrap();
        let out = align(&ds, &cfg).unwrap();
        for (a, b) in out.image().iter().chain(out.text()).zip(ds.image().iter().chain(ds.text())) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn half_lambda_halves_pre_normalization_gap() {
        let v = array![[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]];
        let t = array![[0.0, -1.0], [-0.8, 0.6], [-1.0, 0.0]];
        let ds = dataset(v, t);
        let cfg = AlignmentConfig::from_train(&ds, 0.5).unwrap();
        let gap = shift(&ds, &cfg).unwrap().centroid_gap(None);
        for (a, b) in gap.iter().zip(cfg.delta().iter()) {
            assert!((a - 0.5 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn collapsing_shift_reports_row_and_lambda() {
        // v = -t, so at lambda = 1 both rows move to the origin.
        let ds = dataset(array![[1.0, 0.0]], array![[-1.0, 0.0]]);
        let cfg = AlignmentConfig::from_train(&ds, 1.0).unwrap();
        match align(&ds, &cfg) {
            Err(GapError::DegenerateAlignment { row, lambda, .. }) => {
                assert_eq!(row, 0);
                assert_eq!(lambda, 1.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn delta_dimension_checked() {
        let ds = dataset(array![[1.0, 0.0]], array![[0.0, 1.0]]);
        let cfg = AlignmentConfig::new(0.5, array![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(align(&ds, &cfg), Err(GapError::Parameter { .. })));
    }

    #[test]
    fn selector_parsing() {
        assert_eq!("all".parse::<SplitSelector>().unwrap(), SplitSelector::All);
        assert_eq!("val".parse::<SplitSelector>().unwrap(), SplitSelector::Val);
        assert!("bogus".parse::<SplitSelector>().is_err());
    }
}
