//! Two-tower contrastive training on synthetic paired data.
//!
//! Each tower is an MLP with the configured activation on hidden layers and a
//! linear output layer, followed by row normalization. Training is plain
//! minibatch SGD on the symmetric InfoNCE loss with hand-written backprop.
//! The similarity and gradient kernels are explicit loops so that identical
//! towers fed identical data stay bitwise identical.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Activation, CorpusSpec, RandomNet, RandomNetSpec, SyntheticCorpus};
use crate::error::{GapError, Result};
use crate::numeric::{column_means, splitmix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClipConfig {
    pub image_encoder: RandomNetSpec,
    pub text_encoder: RandomNetSpec,
    pub steps: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Geometry is recorded every `log_every` steps and after the last one.
    pub log_every: usize,
    /// Drives minibatch sampling only; tower weights come from the specs.
    pub seed: u64,
    /// Skip the activation on the output layer.
    pub linear_head: bool,
}

impl Default for ToyClipConfig {
    fn default() -> Self {
        let tower = RandomNetSpec {
            depth: 2,
            width: 16,
            input_dim: 16,
            activation: Activation::Tanh,
            init_scale: 1.0,
            init: super::WeightInit::Gaussian,
            seed: 1,
        };
        ToyClipConfig {
            text_encoder: tower.with_seed(2),
            image_encoder: tower,
            steps: 2000,
            temperature: 0.07,
            learning_rate: 0.003,
            batch_size: 256,
            log_every: 50,
            seed: 0,
            linear_head: true,
        }
    }
}

impl ToyClipConfig {
    pub fn validate(&self) -> Result<()> {
        self.image_encoder.validate()?;
        self.text_encoder.validate()?;
        if self.image_encoder.depth == 0 || self.text_encoder.depth == 0 {
            return Err(GapError::parameter("depth", "trainable towers need at least one layer"));
        }
        if self.image_encoder.output_dim() != self.text_encoder.output_dim() {
            return Err(GapError::parameter("width", "towers must share an output dimension"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GapError::parameter("temperature", "must be positive and finite"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GapError::parameter("learning_rate", "must be positive and finite"));
        }
        if self.batch_size < 2 {
            return Err(GapError::parameter("batch_size", "need at least two pairs per batch"));
        }
        if self.log_every == 0 {
            return Err(GapError::parameter("log_every", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyClipLogEntry {
    /// Number of SGD updates applied so far.
    pub step: usize,
    pub gap_norm: f64,
    pub r_image: f64,
    pub r_text: f64,
    /// Symmetric InfoNCE on a fixed evaluation batch.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClipTrajectory {
    pub entries: Vec<ToyClipLogEntry>,
}

impl ToyClipTrajectory {
    pub fn initial(&self) -> &ToyClipLogEntry {
        &self.entries[0]
    }

    pub fn last(&self) -> &ToyClipLogEntry {
        self.entries.last().expect("trajectory always has an initial entry")
    }

    pub fn gap_norms(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.gap_norm).collect()
    }
}

/// Paired corpora sharing a latent: row i of both corpora derives from the
/// same latent draw, seen through two random linear views plus independent
/// noise.
pub fn paired_corpora(latent: &CorpusSpec, input_dim: usize, noise: f64) -> Result<(SyntheticCorpus, SyntheticCorpus)> {
    let z = latent.generate()?;
    if input_dim == 0 || !(noise >= 0.0) {
        return Err(GapError::parameter("input_dim", "need input_dim >= 1 and noise >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(latent.seed ^ 0x7061_6972));
    let k = latent.dim;
    let scale = 1.0 / (k as f64).sqrt();
    let view = |rng: &mut ChaCha8Rng| -> Array2<f64> {
        let a = Array2::from_shape_simple_fn((k, input_dim), || scale * rng.sample::<f64, _>(StandardNormal));
        let mut x = z.samples.dot(&a);
        x.mapv_inplace(|v| v + noise * rng.sample::<f64, _>(StandardNormal));
        x
    };
    let image = view(&mut rng);
    let text = view(&mut rng);
    Ok((
        SyntheticCorpus::from_samples(image, z.diversity)?,
        SyntheticCorpus::from_samples(text, z.diversity)?,
    ))
}

struct Tower {
    net: RandomNet,
    linear_head: bool,
}

struct TowerCache {
    /// Layer inputs, one per layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations, one per layer.
    pre: Vec<Array2<f64>>,
    norms: Vec<f64>,
    unit: Array2<f64>,
}

impl Tower {
    fn forward(&self, x: ArrayView2<'_, f64>) -> Result<TowerCache> {
        let last = self.net.layers.len() - 1;
        let act = self.net.activation;
        let mut inputs = Vec::with_capacity(last + 1);
        let mut pre = Vec::with_capacity(last + 1);
        let mut h = x.to_owned();
        for (l, layer) in self.net.layers.iter().enumerate() {
            let z = h.dot(&layer.weights.t()) + layer.bias.view().insert_axis(Axis(0));
            inputs.push(h);
            h = if l == last && self.linear_head { z.clone() } else { z.mapv(|v| act.apply(v)) };
            pre.push(z);
        }
        let mut norms = Vec::with_capacity(h.nrows());
        for (i, mut row) in h.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !n.is_finite() {
                return Err(GapError::NonFinite {
                    context: "tower output".into(),
                    index: i,
                });
            }
            if n <= 1e-12 {
                return Err(GapError::DegenerateEmbedding { row: i, norm: n });
            }
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        Ok(TowerCache {
            inputs,
            pre,
            norms,
            unit: h,
        })
    }

    fn is_finite(&self) -> bool {
        self.net
            .layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.unit)
    }

    /// Backpropagates `d_unit` (gradient w.r.t. the unit rows) and applies
    /// an SGD step.
    fn backward_step(&mut self, cache: TowerCache, mut d_unit: Array2<f64>, lr: f64) {
        for (i, mut g) in d_unit.rows_mut().into_iter().enumerate() {
            let u = cache.unit.row(i);
            let proj = u.dot(&g);
            let inv = 1.0 / cache.norms[i];
            for (gk, &uk) in g.iter_mut().zip(u.iter()) {
                *gk = (*gk - uk * proj) * inv;
            }
        }
        let last = self.net.layers.len() - 1;
        let act = self.net.activation;
        let mut dh = d_unit;
        for l in (0..=last).rev() {
            let dz = if l == last && self.linear_head {
                dh
            } else {
                let mut d = dh;
                d.zip_mut_with(&cache.pre[l], |g, &z| *g *= act.derivative(z));
                d
            };
            let layer = &mut self.net.layers[l];
            let grad_w = dz.t().dot(&cache.inputs[l]);
            let grad_b = dz.sum_axis(Axis(0));
            dh = dz.dot(&layer.weights);
            layer.weights.scaled_add(-lr, &grad_w);
            layer.bias.scaled_add(-lr, &grad_b);
        }
    }
}

/// Symmetric InfoNCE and its gradient w.r.t. both sets of unit rows.
fn symmetric_infonce(u: &Array2<f64>, v: &Array2<f64>, tau: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let (b, d) = u.dim();
    let us = u.as_standard_layout();
    let vs = v.as_standard_layout();
    let (us, vs) = (us.as_slice().unwrap(), vs.as_slice().unwrap());

    let mut sim = vec![0.0; b * b];
    for i in 0..b {
        let ui = &us[i * d..(i + 1) * d];
        for j in 0..b {
            let vj = &vs[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for k in 0..d {
                acc += ui[k] * vj[k];
            }
            sim[i * b + j] = acc / tau;
        }
    }
    let mut sim_t = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            sim_t[j * b + i] = sim[i * b + j];
        }
    }
    // Image->text rows of `sim`, text->image rows of its transpose.
    let mut p_row = vec![0.0; b * b];
    let mut p_col_t = vec![0.0; b * b];
    let mut loss = 0.0;
    for i in 0..b {
        let lr = softmax_row(&sim[i * b..(i + 1) * b], i, &mut p_row[i * b..(i + 1) * b]);
        let lc = softmax_row(&sim_t[i * b..(i + 1) * b], i, &mut p_col_t[i * b..(i + 1) * b]);
        loss += lr + lc;
    }
    loss /= 2.0 * b as f64;

    let scale = 0.5 / b as f64;
    let mut ds = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let eye = if i == j { 1.0 } else { 0.0 };
            ds[i * b + j] = scale * (p_row[i * b + j] - eye) + scale * (p_col_t[j * b + i] - eye);
        }
    }
    let mut du = vec![0.0; b * d];
    let mut dv = vec![0.0; b * d];
    for i in 0..b {
        let (dui, dvi) = (&mut du[i * d..(i + 1) * d], &mut dv[i * d..(i + 1) * d]);
        for j in 0..b {
            let (a, c) = (ds[i * b + j], ds[j * b + i]);
            let (vj, uj) = (&vs[j * d..(j + 1) * d], &us[j * d..(j + 1) * d]);
            for k in 0..d {
                dui[k] += a * vj[k];
                dvi[k] += c * uj[k];
            }
        }
    }
    for x in du.iter_mut().chain(dv.iter_mut()) {
        *x /= tau;
    }
    let shape = (b, d);
    (
        loss,
        Array2::from_shape_vec(shape, du).expect("shape matches"),
        Array2::from_shape_vec(shape, dv).expect("shape matches"),
    )
}

/// Softmax of `logits` into `out`; returns the cross-entropy of entry `target`.
fn softmax_row(logits: &[f64], target: usize, out: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &s) in out.iter_mut().zip(logits) {
        *o = (s - max).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
    denom.ln() - (logits[target] - max)
}

fn geometry(image: &Tower, text: &Tower, xi: ArrayView2<'_, f64>, xt: ArrayView2<'_, f64>) -> Result<(f64, f64, f64)> {
    let u = image.embed(xi)?;
    let v = text.embed(xt)?;
    let mu = column_means(u.view(), None);
    let mv = column_means(v.view(), None);
    let gap = &mu - &mv;
    Ok((gap.dot(&gap).sqrt(), mu.dot(&mu).sqrt(), mv.dot(&mv).sqrt()))
}

fn diverged(err: GapError, step: usize) -> GapError {
    match err {
        GapError::NonFinite { .. } => GapError::NonFinite {
            context: "toy contrastive training diverged".into(),
            index: step,
        },
        other => other,
    }
}

/// Trains both towers and records the modality gap along the way.
pub fn train_toy_clip(image: &SyntheticCorpus, text: &SyntheticCorpus, config: &ToyClipConfig) -> Result<ToyClipTrajectory> {
    config.validate()?;
    let n = image.samples.nrows();
    if text.samples.nrows() != n {
        return Err(GapError::parameter("corpora", "image and text corpora must be row-paired"));
    }
    if image.samples.ncols() != config.image_encoder.input_dim || text.samples.ncols() != config.text_encoder.input_dim {
        return Err(GapError::parameter("input_dim", "corpus width does not match the tower input_dim"));
    }
    let batch = config.batch_size.min(n);
    let mut img = Tower {
        net: RandomNet::sample(&config.image_encoder)?,
        linear_head: config.linear_head,
    };
    let mut txt = Tower {
        net: RandomNet::sample(&config.text_encoder)?,
        linear_head: config.linear_head,
    };
    let eval_i = image.samples.slice(s![..batch, ..]);
    let eval_t = text.samples.slice(s![..batch, ..]);
    let log = |img: &Tower, txt: &Tower, step: usize| -> Result<ToyClipLogEntry> {
        let (gap_norm, r_image, r_text) = geometry(img, txt, image.samples.view(), text.samples.view())?;
        let (loss, _, _) = symmetric_infonce(&img.embed(eval_i)?, &txt.embed(eval_t)?, config.temperature);
        Ok(ToyClipLogEntry {
            step,
            gap_norm,
            r_image,
            r_text,
            loss,
        })
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut entries = vec![log(&img, &txt, 0)?];
    for step in 0..config.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;
        let bi = image.samples.select(Axis(0), rows);
        let bt = text.samples.select(Axis(0), rows);
        let ci = img.forward(bi.view()).map_err(|e| diverged(e, step))?;
        let ct = txt.forward(bt.view()).map_err(|e| diverged(e, step))?;
        let (loss, du, dv) = symmetric_infonce(&ci.unit, &ct.unit, config.temperature);
        if !loss.is_finite() {
            return Err(GapError::NonFinite {
                context: "toy contrastive loss".into(),
                index: step,
            });
        }
        img.backward_step(ci, du, config.learning_rate);
        txt.backward_step(ct, dv, config.learning_rate);
        if !(img.is_finite() && txt.is_finite()) {
            return Err(GapError::NonFinite {
                context: "toy contrastive weights".into(),
                index: step,
            });
        }
        let done = step + 1;
        if done % config.log_every == 0 || done == config.steps {
            entries.push(log(&img, &txt, done).map_err(|e| diverged(e, step))?);
        }
    }
    Ok(ToyClipTrajectory { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_config() -> ToyClipConfig {
        let tower = RandomNetSpec {
            depth: 2,
            width: 4,
            input_dim: 3,
            activation: Activation::Tanh,
            init_scale: 1.0,
            init: super::super::WeightInit::Gaussian,
            seed: 3,
        };
        ToyClipConfig {
            text_encoder: tower.with_seed(4),
            image_encoder: tower,
            steps: 5,
            temperature: 0.5,
            learning_rate: 0.1,
            batch_size: 6,
            log_every: 1,
            seed: 0,
            linear_head: true,
        }
    }

    fn loss_of(img: &Tower, txt: &Tower, xi: &Array2<f64>, xt: &Array2<f64>, tau: f64) -> f64 {
        symmetric_infonce(&img.embed(xi.view()).unwrap(), &txt.embed(xt.view()).unwrap(), tau).0
    }

    #[test]
    fn loss_matches_two_sided_cross_entropy() {
        let u = array![[1.0, 0.0], [0.0, 1.0]];
        let v = array![[0.6, 0.8], [0.8, 0.6]];
        let (loss, _, _) = symmetric_infonce(&u, &v, 1.0);
        let ce = |a: f64, b: f64| -(a.exp() / (a.exp() + b.exp())).ln();
        // Rows: (0.6 | 0.8) and (0.6 | 0.8); columns: (0.6 | 0.8) and (0.6 | 0.8).
        let expected = 0.5 * (0.5 * (ce(0.6, 0.8) + ce(0.6, 0.8)) + 0.5 * (ce(0.6, 0.8) + ce(0.6, 0.8)));
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xi = Array2::from_shape_simple_fn((6, 3), || rng.sample::<f64, _>(StandardNormal));
        let xt = Array2::from_shape_simple_fn((6, 3), || rng.sample::<f64, _>(StandardNormal));
        let img = Tower {
            net: RandomNet::sample(&cfg.image_encoder).unwrap(),
            linear_head: true,
        };
        let txt = Tower {
            net: RandomNet::sample(&cfg.text_encoder).unwrap(),
            linear_head: true,
        };
        // One SGD step with lr = 1 moves each weight by exactly -grad.
        let mut stepped = Tower { net: img.net.clone(), linear_head: true };
        let ci = stepped.forward(xi.view()).unwrap();
        let ct = txt.forward(xt.view()).unwrap();
        let (_, du, _) = symmetric_infonce(&ci.unit, &ct.unit, cfg.temperature);
        stepped.backward_step(ci, du, 1.0);

        let h = 1e-6;
        for l in 0..2 {
            for (idx, &w) in img.net.layers[l].weights.indexed_iter() {
                let analytic = w - stepped.net.layers[l].weights[idx];
                let mut plus = Tower { net: img.net.clone(), linear_head: true };
                plus.net.layers[l].weights[idx] += h;
                let mut minus = Tower { net: img.net.clone(), linear_head: true };
                minus.net.layers[l].weights[idx] -= h;
                let numeric = (loss_of(&plus, &txt, &xi, &xt, cfg.temperature)
                    - loss_of(&minus, &txt, &xi, &xt, cfg.temperature))
                    / (2.0 * h);
                assert!((analytic - numeric).abs() < 1e-6, "layer {l} {idx:?}: {analytic} vs {numeric}");
            }
            for (k, &bk) in img.net.layers[l].bias.iter().enumerate() {
                let analytic = bk - stepped.net.layers[l].bias[k];
                let mut plus = Tower { net: img.net.clone(), linear_head: true };
                plus.net.layers[l].bias[k] += h;
                let mut minus = Tower { net: img.net.clone(), linear_head: true };
                minus.net.layers[l].bias[k] -= h;
                let numeric = (loss_of(&plus, &txt, &xi, &xt, cfg.temperature)
                    - loss_of(&minus, &txt, &xi, &xt, cfg.temperature))
                    / (2.0 * h);
                assert!((analytic - numeric).abs() < 1e-6, "bias {l}/{k}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn identical_towers_have_no_gap() {
        let mut cfg = small_config();
        cfg.text_encoder = cfg.image_encoder.clone();
        let corpus = CorpusSpec::diverse(20, 3, 2).generate().unwrap();
        let traj = train_toy_clip(&corpus, &corpus, &cfg).unwrap();
        assert_eq!(traj.entries.len(), 6);
        assert!(traj.entries.iter().all(|e| e.gap_norm == 0.0));
    }

    #[test]
    fn deterministic() {
        let cfg = small_config();
        let (a, b) = paired_corpora(&CorpusSpec::diverse(30, 3, 1), 3, 0.1).unwrap();
        assert_eq!(train_toy_clip(&a, &b, &cfg).unwrap(), train_toy_clip(&a, &b, &cfg).unwrap());
    }

    #[test]
    fn divergence_reports_step() {
        let mut cfg = small_config();
        cfg.learning_rate = 1e300;
        let (a, b) = paired_corpora(&CorpusSpec::diverse(30, 3, 1), 3, 0.1).unwrap();
        assert!(matches!(train_toy_clip(&a, &b, &cfg), Err(GapError::NonFinite { .. })));
    }

    #[test]
    fn rejects_mismatched_corpora() {
        let cfg = small_config();
        let a = CorpusSpec::diverse(30, 3, 1).generate().unwrap();
        let b = CorpusSpec::diverse(31, 3, 1).generate().unwrap();
        assert!(train_toy_clip(&a, &b, &cfg).is_err());
    }
}
