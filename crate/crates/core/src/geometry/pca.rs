use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};

use super::SplitSelector;
use crate::embedstore::PairedEmbeddingDataset;
use crate::error::{GapError, Result};
use crate::numeric::column_means;

/// Principal axes of a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// k x d, orthonormal rows, largest-magnitude entry of each row positive.
    pub components: Array2<f64>,
    /// Top-k eigenvalues of the sample covariance, non-increasing.
    pub explained_variance: Vec<f64>,
    pub mean: Array1<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
    /// Every eigenvalue (min(n, d) of them), non-increasing.
    pub spectrum: Vec<f64>,
}

impl Pca {
    pub fn transform(&self, rows: ArrayView2<'_, f64>) -> Array2<f64> {
        let centered = &rows - &self.mean.view().insert_axis(Axis(0));
        centered.dot(&self.components.t())
    }
}

/// Joint projection of both modalities onto one shared principal subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    pub projected_image: Array2<f64>,
    pub projected_text: Array2<f64>,
    pub mean_used: Array1<f64>,
    pub total_variance: f64,
    pub participation_ratio: f64,
}

/// `(sum l)^2 / sum l^2` over an eigenvalue spectrum; an effective rank.
pub fn participation_ratio(eigenvalues: &[f64]) -> f64 {
    let s: f64 = eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let s2: f64 = eigenvalues.iter().map(|l| l.max(0.0).powi(2)).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Fits PCA with an (n - 1)-normalized covariance. Uses the d x d covariance
/// when n >= d and the n x n Gram matrix otherwise.
pub fn fit_pca(rows: ArrayView2<'_, f64>, k: usize) -> Result<Pca> {
    let (n, d) = rows.dim();
    if n < 2 {
        return Err(GapError::parameter("rows", "PCA needs at least two rows"));
    }
    if k == 0 || k > n.min(d) {
        return Err(GapError::parameter(
            "k",
            format!("component count {k} must be in [1, {}]", n.min(d)),
        ));
    }
    let mean = column_means(rows, None);
    let centered = &rows - &mean.view().insert_axis(Axis(0));
    let denom = (n - 1) as f64;
    let total_variance = centered.iter().map(|x| x * x).sum::<f64>() / denom;

    let (spectrum, mut axes) = if n >= d {
        let cov = centered.t().dot(&centered) / denom;
        let (vals, vecs) = sorted_eigen(&cov);
        let axes: Vec<Array1<f64>> = (0..k).map(|j| vecs.column(j).to_owned()).collect();
        (vals, axes)
    } else {
        let gram = centered.dot(&centered.t()) / denom;
        let (vals, vecs) = sorted_eigen(&gram);
        let floor = 1e-12 * vals.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
        let mut axes = Vec::with_capacity(k);
        for j in 0..k {
            if vals[j] <= floor {
                break;
            }
            let mut c = centered.t().dot(&vecs.column(j));
            let norm = c.dot(&c).sqrt();
            c /= norm;
            axes.push(c);
        }
        complete_orthonormal(&mut axes, k, d);
        (vals, axes)
    };

    for axis in &mut axes {
        orient(axis);
    }
    let mut components = Array2::zeros((k, d));
    for (j, axis) in axes.iter().enumerate() {
        components.row_mut(j).assign(axis);
    }
    let spectrum: Vec<f64> = spectrum.into_iter().map(|l| l.max(0.0)).collect();
    Ok(Pca {
        components,
        explained_variance: spectrum[..k].to_vec(),
        mean,
        total_variance,
        spectrum,
    })
}

/// PCA fitted on the union of image and text rows of the selected split.
pub fn pca_project(
    dataset: &PairedEmbeddingDataset,
    k: usize,
    split: SplitSelector,
) -> Result<PcaProjection> {
    let rows = split.rows(dataset);
    if rows.is_empty() {
        return Err(GapError::EmptySplit(split.name().into()));
    }
    let image = dataset.image().select(Axis(0), &rows);
    let text = dataset.text().select(Axis(0), &rows);
    let pooled = concatenate(Axis(0), &[image.view(), text.view()]).expect("equal widths");
    let pca = fit_pca(pooled.view(), k)?;
    Ok(PcaProjection {
        projected_image: pca.transform(image.view()),
        projected_text: pca.transform(text.view()),
        participation_ratio: participation_ratio(&pca.spectrum),
        components: pca.components,
        explained_variance: pca.explained_variance,
        mean_used: pca.mean,
        total_variance: pca.total_variance,
    })
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending.
fn sorted_eigen(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Array2::zeros((n, n));
    for (j, &i) in order.iter().enumerate() {
        for r in 0..n {
            vecs[[r, j]] = eig.eigenvectors[(r, i)];
        }
    }
    (vals, vecs)
}

/// Extends `axes` to `k` orthonormal vectors with Gram-Schmidt over the
/// standard basis.
fn complete_orthonormal(axes: &mut Vec<Array1<f64>>, k: usize, d: usize) {
    let mut e = 0;
    while axes.len() < k && e < d {
        let mut c = Array1::zeros(d);
        c[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for a in axes.iter() {
                let p = a.dot(&c);
                c.scaled_add(-p, a);
            }
        }
        let norm = c.dot(&c).sqrt();
        if norm > 1e-8 {
            c /= norm;
            axes.push(c);
        }
    }
}

fn orient(axis: &mut Array1<f64>) {
    let mut best = 0;
    for (i, x) in axis.iter().enumerate() {
        if x.abs() > axis[best].abs() {
            best = i;
        }
    }
    if axis[best] < 0.0 {
        axis.mapv_inplace(|x| -x);
    }
}
