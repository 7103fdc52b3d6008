//! Desk-scale simulations of embedding geometry: the cone effect of random
//! deep networks, the law-of-total-variance split of output variance, the
//! attraction/repulsion form of InfoNCE, and a toy two-tower contrastive
//! trainer.

mod toyclip;

pub use toyclip::{paired_corpora, train_toy_clip, ToyClipConfig, ToyClipTrajectory};

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedstore::l2_normalize;
use crate::error::{GapError, Result};
use crate::geometry::{check_unit_rows, mean_resultant_length};
use crate::numeric::{column_means, splitmix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightInit {
    /// Weights and biases drawn from N(0, (init_scale / sqrt(fan_in))^2).
    Gaussian,
    /// Square orthogonal weights scaled by init_scale, zero biases.
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomNetSpec {
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub activation: Activation,
    pub init_scale: f64,
    pub init: WeightInit,
    pub seed: u64,
}

impl Default for RandomNetSpec {
    fn default() -> Self {
        RandomNetSpec {
            depth: 4,
            width: 64,
            input_dim: 64,
            activation: Activation::Relu,
            init_scale: 1.0,
            init: WeightInit::Gaussian,
            seed: 0,
        }
    }
}

impl RandomNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.input_dim == 0 {
            return Err(GapError::parameter("width", "width and input_dim must be at least 1"));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(GapError::parameter("init_scale", "must be positive and finite"));
        }
        if self.init == WeightInit::Orthogonal && self.depth > 0 && self.width != self.input_dim {
            return Err(GapError::parameter("init", "orthogonal init needs width == input_dim"));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        if self.depth == 0 {
            self.input_dim
        } else {
            self.width
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RandomNetSpec { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    /// out x in.
    pub(crate) weights: Array2<f64>,
    pub(crate) bias: Array1<f64>,
}

/// An MLP whose every layer is `activation(W h + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomNet {
    pub(crate) layers: Vec<Layer>,
    pub(crate) activation: Activation,
}

impl RandomNet {
    pub fn sample(spec: &RandomNetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::with_capacity(spec.depth);
        let mut fan_in = spec.input_dim;
        for _ in 0..spec.depth {
            let layer = match spec.init {
                WeightInit::Gaussian => {
                    let std = spec.init_scale / (fan_in as f64).sqrt();
                    let weights = Array2::from_shape_simple_fn((spec.width, fan_in), || {
                        std * rng.sample::<f64, _>(StandardNormal)
                    });
                    let bias = Array1::from_shape_simple_fn(spec.width, || std * rng.sample::<f64, _>(StandardNormal));
                    Layer { weights, bias }
                }
                WeightInit::Orthogonal => Layer {
                    weights: random_orthogonal(spec.width, &mut rng) * spec.init_scale,
                    bias: Array1::zeros(spec.width),
                },
            };
            layers.push(layer);
            fan_in = spec.width;
        }
        Ok(RandomNet {
            layers,
            activation: spec.activation,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Raw (unnormalized) outputs.
    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut h = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            if h.ncols() != layer.weights.ncols() {
                return Err(GapError::parameter(
                    "inputs",
                    format!("layer {i} expects {} features, got {}", layer.weights.ncols(), h.ncols()),
                ));
            }
            let act = self.activation;
            h = h.dot(&layer.weights.t()) + layer.bias.view().insert_axis(Axis(0));
            h.mapv_inplace(|z| act.apply(z));
        }
        Ok(h)
    }

    /// Outputs projected onto the unit sphere.
    pub fn embed(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        l2_normalize(self.forward(inputs)?.view())
    }
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // Fix column signs so the draw is Haar-distributed and deterministic.
    Array2::from_shape_fn((n, n), |(i, j)| {
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * s
    })
}

/// Unit-normalized outputs of a freshly sampled network. With depth 0 this
/// is just the normalized input.
pub fn random_net_forward(spec: &RandomNetSpec, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if inputs.ncols() != spec.input_dim {
        return Err(GapError::parameter(
            "inputs",
            format!("spec input_dim is {}, inputs have {} columns", spec.input_dim, inputs.ncols()),
        ));
    }
    RandomNet::sample(spec)?.embed(inputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeMetrics {
    pub r: f64,
    pub mean_pairwise_cosine: f64,
    /// Number of unordered pairs the mean covers (always all of them).
    pub pairs: u64,
}

/// Mean resultant length and mean cosine over all unordered pairs.
///
/// The pairwise mean uses `sum_{i<j} x_i.x_j = (|sum x|^2 - sum |x_i|^2) / 2`,
/// which is exact and linear in N.
pub fn cone_metrics(embeddings: ArrayView2<'_, f64>) -> Result<ConeMetrics> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(GapError::parameter("embeddings", "pairwise cosine needs at least two rows"));
    }
    check_unit_rows(embeddings, "embedding")?;
    let r = mean_resultant_length(embeddings)?;
    let sum = column_means(embeddings, None) * n as f64;
    let sq_norms: f64 = embeddings.rows().into_iter().map(|row| row.dot(&row)).sum();
    let pair_sum = 0.5 * (sum.dot(&sum) - sq_norms);
    let pairs = (n as u64) * (n as u64 - 1) / 2;
    Ok(ConeMetrics {
        r,
        mean_pairwise_cosine: pair_sum / pairs as f64,
        pairs,
    })
}

/// Mixture-of-Gaussians generator. Diversity is `clusters * spread`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Within-cluster standard deviation.
    pub spread: f64,
    /// Standard deviation of the cluster centers.
    pub center_scale: f64,
    pub seed: u64,
}

impl CorpusSpec {
    /// A single isotropic standard Gaussian blob.
    pub fn gaussian(n: usize, dim: usize, seed: u64) -> Self {
        CorpusSpec {
            n,
            dim,
            clusters: 1,
            spread: 1.0,
            center_scale: 0.0,
            seed,
        }
    }

    /// Few tight clusters.
    pub fn homogeneous(n: usize, dim: usize, seed: u64) -> Self {
        CorpusSpec {
            n,
            dim,
            clusters: 2,
            spread: 0.25,
            center_scale: 1.0,
            seed,
        }
    }

    /// Many wide clusters.
    pub fn diverse(n: usize, dim: usize, seed: u64) -> Self {
        CorpusSpec {
            n,
            dim,
            clusters: 16,
            spread: 1.0,
            center_scale: 1.0,
            seed,
        }
    }

    pub fn diversity(&self) -> f64 {
        self.clusters as f64 * self.spread
    }

    /// Same centers and noise draws with the within-cluster spread scaled,
    /// which scales diversity by the same factor.
    pub fn with_diversity_scaled(&self, factor: f64) -> Self {
        CorpusSpec {
            spread: self.spread * factor,
            ..self.clone()
        }
    }

    pub fn generate(&self) -> Result<SyntheticCorpus> {
        if self.n < 2 {
            return Err(GapError::parameter("n", "corpus needs at least two samples"));
        }
        if self.dim == 0 || self.clusters == 0 {
            return Err(GapError::parameter("dim", "dim and clusters must be at least 1"));
        }
        if !(self.spread >= 0.0 && self.center_scale >= 0.0) {
            return Err(GapError::parameter("spread", "scales must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let centers = Array2::from_shape_simple_fn((self.clusters, self.dim), || {
            self.center_scale * rng.sample::<f64, _>(StandardNormal)
        });
        let mut samples = Array2::zeros((self.n, self.dim));
        for (i, mut row) in samples.rows_mut().into_iter().enumerate() {
            let c = centers.row(i % self.clusters);
            for (x, &mu) in row.iter_mut().zip(c.iter()) {
                *x = mu + self.spread * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(SyntheticCorpus {
            samples,
            diversity: self.diversity(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub samples: Array2<f64>,
    pub diversity: f64,
}

impl SyntheticCorpus {
    pub fn from_samples(samples: Array2<f64>, diversity: f64) -> Result<Self> {
        if samples.nrows() < 2 {
            return Err(GapError::parameter("samples", "corpus needs at least two samples"));
        }
        Ok(SyntheticCorpus { samples, diversity })
    }
}

/// Monte Carlo terms of the law of total variance over network draws,
/// summed over output coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    /// Mean over draws of the within-draw (data) variance.
    pub data_term: f64,
    /// Variance over draws of the per-draw mean output.
    pub weight_term: f64,
    /// Variance over every (draw, sample) output, computed directly.
    pub total: f64,
    pub n_weight_draws: usize,
    pub n_samples: usize,
}

/// Seed of the `k`-th weight draw for a family rooted at `seed`.
pub fn draw_seed(seed: u64, k: usize) -> u64 {
    splitmix64(seed ^ splitmix64(k as u64).rotate_left(17))
}

/// Splits the variance of normalized network outputs into data- and
/// weight-induced parts. All variances use the population (1/n) form, so
/// `data_term + weight_term == total` holds exactly up to rounding.
///
/// One draw is accepted (the weight term is then 0); meaningful estimates
/// need at least two.
pub fn variance_decomposition(
    family: &RandomNetSpec,
    corpus: &SyntheticCorpus,
    n_weight_draws: usize,
) -> Result<VarianceDecomposition> {
    let n = corpus.samples.nrows();
    if n < 2 {
        return Err(GapError::parameter("corpus", "corpus needs at least two samples"));
    }
    if n_weight_draws == 0 {
        return Err(GapError::parameter("n_weight_draws", "need at least one draw"));
    }
    let outputs = (0..n_weight_draws)
        .map(|k| random_net_forward(&family.with_seed(draw_seed(family.seed, k)), corpus.samples.view()))
        .collect::<Result<Vec<_>>>()?;
    let width = outputs[0].ncols();

    let means: Vec<Array1<f64>> = outputs.iter().map(|h| column_means(h.view(), None)).collect();
    let data_term = outputs
        .iter()
        .zip(&means)
        .map(|(h, m)| {
            h.rows()
                .into_iter()
                .map(|row| row.iter().zip(m.iter()).map(|(x, mu)| (x - mu).powi(2)).sum::<f64>())
                .sum::<f64>()
                / n as f64
        })
        .sum::<f64>()
        / n_weight_draws as f64;

    let mut grand = Array1::<f64>::zeros(width);
    for m in &means {
        grand += m;
    }
    grand /= n_weight_draws as f64;
    let weight_term = means
        .iter()
        .map(|m| m.iter().zip(grand.iter()).map(|(a, g)| (a - g).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n_weight_draws as f64;

    let total = outputs
        .iter()
        .flat_map(|h| h.rows().into_iter().collect::<Vec<_>>())
        .map(|row| row.iter().zip(grand.iter()).map(|(x, g)| (x - g).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (n * n_weight_draws) as f64;

    Ok(VarianceDecomposition {
        data_term,
        weight_term,
        total,
        n_weight_draws,
        n_samples: n,
    })
}

/// Batch InfoNCE (image -> text) written as attraction plus repulsion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoNceBreakdown {
    /// Batch means.
    pub total_loss: f64,
    pub attraction: f64,
    pub repulsion: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub per_sample_total: Vec<f64>,
    pub per_sample_attraction: Vec<f64>,
    pub per_sample_repulsion: Vec<f64>,
}

/// Per sample: `-log softmax_j(v_i.t_j / tau)[i]`, with attraction
/// `-v_i.t_i / tau` and repulsion `log sum_j exp(v_i.t_j / tau)`.
/// The total is evaluated independently of the two terms, as a stable
/// log-softmax.
pub fn infonce_decomposed(
    image_batch: ArrayView2<'_, f64>,
    text_batch: ArrayView2<'_, f64>,
    temperature: f64,
) -> Result<InfoNceBreakdown> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(GapError::parameter("temperature", format!("{temperature} is not positive")));
    }
    if image_batch.dim() != text_batch.dim() {
        return Err(GapError::parameter("batch", "image and text batches differ in shape"));
    }
    let b = image_batch.nrows();
    if b == 0 {
        return Err(GapError::parameter("batch", "batch is empty"));
    }
    check_unit_rows(image_batch, "image")?;
    check_unit_rows(text_batch, "text")?;

    let logits = image_batch.dot(&text_batch.t()) / temperature;
    let mut per_total = Vec::with_capacity(b);
    let mut per_attr = Vec::with_capacity(b);
    let mut per_rep = Vec::with_capacity(b);
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_denom = row.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        per_total.push(log_denom - (row[i] - max));
        per_attr.push(-row[i]);
        per_rep.push(max + log_denom);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / b as f64;
    Ok(InfoNceBreakdown {
        total_loss: mean(&per_total),
        attraction: mean(&per_attr),
        repulsion: mean(&per_rep),
        temperature,
        batch_size: b,
        per_sample_total: per_total,
        per_sample_attraction: per_attr,
        per_sample_repulsion: per_rep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn depth_zero_is_normalization() {
        let spec = RandomNetSpec {
            depth: 0,
            input_dim: 2,
            ..Default::default()
        };
        let out = random_net_forward(&spec, array![[3.0, 4.0], [0.0, -2.0]].view()).unwrap();
        assert_eq!(out, array![[0.6, 0.8], [0.0, -1.0]]);
    }

    #[test]
    fn orthogonal_identity_net_preserves_r() {
        let corpus = CorpusSpec::homogeneous(300, 8, 5).generate().unwrap();
        let spec = RandomNetSpec {
            depth: 1,
            width: 8,
            input_dim: 8,
            activation: Activation::Identity,
            init: WeightInit::Orthogonal,
            ..Default::default()
        };
        let before = l2_normalize(corpus.samples.view()).unwrap();
        let after = random_net_forward(&spec, corpus.samples.view()).unwrap();
        let r0 = mean_resultant_length(before.view()).unwrap();
        let r1 = mean_resultant_length(after.view()).unwrap();
        assert!((r0 - r1).abs() < 1e-12, "{r0} vs {r1}");
    }

    #[test]
    fn same_seed_same_net() {
        let spec = RandomNetSpec::default();
        assert_eq!(RandomNet::sample(&spec).unwrap(), RandomNet::sample(&spec).unwrap());
        assert_ne!(RandomNet::sample(&spec).unwrap(), RandomNet::sample(&spec.with_seed(1)).unwrap());
    }

    #[test]
    fn dead_relu_output_is_degenerate() {
        let mut net = RandomNet::sample(&RandomNetSpec {
            depth: 1,
            width: 3,
            input_dim: 2,
            ..Default::default()
        })
        .unwrap();
        net.layers[0].weights.fill(0.0);
        net.layers[0].bias.fill(-1.0);
        assert!(matches!(
            net.embed(array![[1.0, 1.0]].view()),
            Err(GapError::DegenerateEmbedding { row: 0, .. })
        ));
    }

    #[test]
    fn identical_vectors_cone() {
        let x = array![[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]];
        let m = cone_metrics(x.view()).unwrap();
        assert!((m.r - 1.0).abs() < 1e-12);
        assert!((m.mean_pairwise_cosine - 1.0).abs() < 1e-12);
        assert_eq!(m.pairs, 3);
    }

    #[test]
    fn orthonormal_basis_cone() {
        let d = 16;
        let m = cone_metrics(Array2::<f64>::eye(d).view()).unwrap();
        assert!(m.mean_pairwise_cosine.abs() < 1e-15);
        assert!((m.r - 1.0 / (d as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cone_needs_two_rows() {
        assert!(cone_metrics(array![[1.0, 0.0]].view()).is_err());
    }

    #[test]
    fn one_draw_has_no_weight_variance() {
        let corpus = CorpusSpec::diverse(64, 8, 1).generate().unwrap();
        let spec = RandomNetSpec {
            input_dim: 8,
            width: 16,
            ..Default::default()
        };
        let v = variance_decomposition(&spec, &corpus, 1).unwrap();
        assert_eq!(v.weight_term, 0.0);
        assert!((v.data_term - v.total).abs() < 1e-12);
    }

    #[test]
    fn constant_corpus_has_no_data_variance() {
        let corpus = SyntheticCorpus::from_samples(Array2::from_elem((10, 4), 0.5), 0.0).unwrap();
        let spec = RandomNetSpec {
            input_dim: 4,
            width: 8,
            ..Default::default()
        };
        let v = variance_decomposition(&spec, &corpus, 4).unwrap();
        assert!(v.data_term.abs() < 1e-20);
        assert!(v.weight_term > 0.0);
    }

    #[test]
    fn single_pair_infonce_is_zero() {
        let v = array![[0.6, 0.8]];
        let t = array![[1.0, 0.0]];
        let out = infonce_decomposed(v.view(), t.view(), 0.07).unwrap();
        assert_eq!(out.total_loss, 0.0);
        assert!((out.attraction + out.repulsion).abs() < 1e-12);
    }

    #[test]
    fn two_pair_hand_example() {
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let t = array![[0.6, 0.8], [0.8, 0.6]];
        let out = infonce_decomposed(v.view(), t.view(), 1.0).unwrap();
        // Row 0 logits (0.6, 0.8), target 0; row 1 logits (0.8, 0.6), target 1.
        let l0 = -(0.6f64.exp() / (0.6f64.exp() + 0.8f64.exp())).ln();
        let l1 = -(0.6f64.exp() / (0.8f64.exp() + 0.6f64.exp())).ln();
        assert!((out.total_loss - 0.5 * (l0 + l1)).abs() < 1e-9);
        assert!((out.attraction - (-0.6)).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let v = array![[1.0, 0.0]];
        assert!(matches!(infonce_decomposed(v.view(), v.view(), 0.0), Err(GapError::Parameter { .. })));
        assert!(matches!(infonce_decomposed(v.view(), v.view(), -1.0), Err(GapError::Parameter { .. })));
    }
}
