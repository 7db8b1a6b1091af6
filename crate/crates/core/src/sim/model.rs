//! Desk-scale models with analytic gradients and their synthetic datasets.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DgcError, Result};
use crate::rng::{derive_stream, Purpose};
use crate::vector::{GradientVector, LayerLayout};

use super::config::{ModelKind, ModelSpec};

/// A differentiable objective over a fixed dataset.
///
/// Losses and gradients are computed in 64-bit from the 32-bit weights.
pub trait Model: Send + Sync {
    fn layout(&self) -> &Arc<LayerLayout>;

    fn sample_count(&self) -> usize;

    /// Mean loss over `batch` and its gradient.
    fn loss_grad(&self, w: &[f64], batch: &[usize]) -> (f64, Vec<f64>);

    fn loss(&self, w: &[f64], batch: &[usize]) -> f64 {
        self.loss_grad(w, batch).0
    }

    /// Task metric over the whole dataset (accuracy for classifiers, the
    /// objective for the quadratic bowl).
    fn metric(&self, w: &[f64]) -> f64;

    fn init_weights(&self, seed: u64) -> Vec<f32>;

    fn all_samples(&self) -> Vec<usize> {
        (0..self.sample_count()).collect()
    }
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Box<dyn Model>> {
    Ok(match spec.kind {
        ModelKind::QuadraticBowl => Box::new(QuadraticBowl::random(spec, seed)?),
        ModelKind::LogisticRegression => Box::new(LogisticRegression::generate(spec, seed)?),
        ModelKind::TinyMlp => Box::new(TinyMlp::generate(spec, seed)?),
    })
}

pub fn to_f64(w: &[f32]) -> Vec<f64> {
    w.iter().map(|&x| f64::from(x)).collect()
}

/// Batch loss and the gradient scaled by `1/N`, so that summing node
/// contributions yields the `1/(N b)` average over all nodes' samples.
pub fn grad(
    model: &dyn Model,
    w: &GradientVector,
    batch: &[usize],
    node_count: usize,
) -> Result<(f64, GradientVector)> {
    let wd = to_f64(w.values());
    let (loss, g) = model.loss_grad(&wd, batch);
    if !loss.is_finite() {
        return Err(DgcError::Diverged(format!(
            "non-finite loss {loss} on a batch of {}",
            batch.len()
        )));
    }
    let scale = 1.0 / node_count as f64;
    let g: Vec<f32> = g.iter().map(|&x| (x * scale) as f32).collect();
    let g = GradientVector::from_values(g, Arc::clone(w.layout()))?;
    Ok((loss, g))
}

fn split_layers(dimension: usize, layers: usize) -> Result<Arc<LayerLayout>> {
    let layers = layers.clamp(1, dimension.max(1));
    let base = dimension / layers;
    let extra = dimension % layers;
    let extents = (0..layers).map(|l| (format!("block{l}"), base + usize::from(l < extra)));
    Ok(Arc::new(LayerLayout::from_extents(extents)?))
}

/// `f(w) = 1/2 w'Aw - b'w` with `A = (1/r) B'B + ridge I`. Data-independent.
#[derive(Debug, Clone)]
pub struct QuadraticBowl {
    layout: Arc<LayerLayout>,
    /// `r x d` factor, row-major.
    factor: Vec<f64>,
    rank: usize,
    ridge: f64,
    linear: Vec<f64>,
    samples: usize,
}

impl QuadraticBowl {
    pub fn random(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let d = spec.dimension;
        let mut rng = derive_stream(seed, 0, 0, Purpose::Dataset);
        let factor = (0..spec.quad_rank * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let linear = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self {
            layout: split_layers(d, spec.layers)?,
            factor,
            rank: spec.quad_rank,
            ridge: spec.quad_ridge,
            linear,
            samples: spec.samples,
        })
    }

    /// `A = I`, `b = 0`.
    pub fn identity(dimension: usize, samples: usize) -> Result<Self> {
        Ok(Self {
            layout: split_layers(dimension, 1)?,
            factor: Vec::new(),
            rank: 0,
            ridge: 1.0,
            linear: vec![0.0; dimension],
            samples,
        })
    }

    fn apply(&self, w: &[f64]) -> Vec<f64> {
        let d = w.len();
        let mut out: Vec<f64> = w.iter().map(|x| self.ridge * x).collect();
        if self.rank > 0 {
            let inv = 1.0 / self.rank as f64;
            for row in self.factor.chunks_exact(d) {
                let proj: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() * inv;
                for (o, a) in out.iter_mut().zip(row) {
                    *o += proj * a;
                }
            }
        }
        out
    }
}

impl Model for QuadraticBowl {
    fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    fn sample_count(&self) -> usize {
        self.samples
    }

    fn loss_grad(&self, w: &[f64], _batch: &[usize]) -> (f64, Vec<f64>) {
        let aw = self.apply(w);
        let mut loss = 0.0;
        let g = aw
            .iter()
            .zip(w)
            .zip(&self.linear)
            .map(|((a, x), b)| {
                loss += 0.5 * a * x - b * x;
                a - b
            })
            .collect();
        (loss, g)
    }

    fn metric(&self, w: &[f64]) -> f64 {
        self.loss(w, &[])
    }

    fn init_weights(&self, seed: u64) -> Vec<f32> {
        let mut rng = derive_stream(seed, 0, 0, Purpose::Init);
        (0..self.layout.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a logit against a 0/1 label.
fn bce(logit: f64, label: f64) -> f64 {
    softplus(logit) - label * logit
}

/// L2-regularized logistic regression on Gaussian class clusters.
///
/// Class means are `+-mu` where `mu` is nonzero only on the first
/// `informative` features; every feature carries isotropic noise.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    layout: Arc<LayerLayout>,
    features: usize,
    x: Vec<f32>,
    y: Vec<f64>,
    l2: f64,
}

impl LogisticRegression {
    pub fn generate(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let d = spec.dimension;
        let n = spec.samples;
        let mut rng = derive_stream(seed, 0, 0, Purpose::Dataset);
        let informative = spec.informative.min(d);
        let scale = spec.separation / (informative.max(1) as f64).sqrt();
        let mean: Vec<f64> = (0..d)
            .map(|j| {
                if j < informative {
                    if rng.random::<bool>() {
                        scale
                    } else {
                        -scale
                    }
                } else {
                    0.0
                }
            })
            .collect();
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as f64;
            let sign = 2.0 * label - 1.0;
            for m in &mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                x.push((sign * m + spec.noise * z) as f32);
            }
            let flip = rng.random::<f64>() < spec.label_noise;
            y.push(if flip { 1.0 - label } else { label });
        }
        Ok(Self {
            layout: Arc::new(LayerLayout::from_extents([("weight", d), ("bias", 1)])?),
            features: d,
            x,
            y,
            l2: spec.l2,
        })
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    fn logit(&self, w: &[f64], i: usize) -> f64 {
        let d = self.features;
        self.row(i)
            .iter()
            .zip(&w[..d])
            .map(|(&a, b)| f64::from(a) * b)
            .sum::<f64>()
            + w[d]
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        0.5 * self.l2 * w[..self.features].iter().map(|x| x * x).sum::<f64>()
    }
}

impl Model for LogisticRegression {
    fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    fn sample_count(&self) -> usize {
        self.y.len()
    }

    fn loss_grad(&self, w: &[f64], batch: &[usize]) -> (f64, Vec<f64>) {
        let d = self.features;
        let inv = 1.0 / batch.len() as f64;
        let mut g = vec![0.0; d + 1];
        let mut loss = 0.0;
        for &i in batch {
            let z = self.logit(w, i);
            loss += bce(z, self.y[i]);
            let r = (sigmoid(z) - self.y[i]) * inv;
            for (gj, &xj) in g[..d].iter_mut().zip(self.row(i)) {
                *gj += r * f64::from(xj);
            }
            g[d] += r;
        }
        for (gj, wj) in g[..d].iter_mut().zip(&w[..d]) {
            *gj += self.l2 * wj;
        }
        (loss * inv + self.penalty(w), g)
    }

    fn metric(&self, w: &[f64]) -> f64 {
        accuracy((0..self.y.len()).map(|i| (self.logit(w, i), self.y[i])))
    }

    fn init_weights(&self, _seed: u64) -> Vec<f32> {
        vec![0.0; self.layout.len()]
    }
}

fn accuracy(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (logit, label) in pairs {
        hit += usize::from((logit > 0.0) == (label > 0.5));
        total += 1;
    }
    hit as f64 / total.max(1) as f64
}

/// Fully connected tanh network with a single logit output, trained with
/// binary cross-entropy on noisy two-moons data.
#[derive(Debug, Clone)]
pub struct TinyMlp {
    layout: Arc<LayerLayout>,
    /// Layer widths including the 2-d input and the 1-d output.
    widths: Vec<usize>,
    x: Vec<[f64; 2]>,
    y: Vec<f64>,
}

impl TinyMlp {
    pub fn generate(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.hidden.is_empty() {
            return Err(DgcError::InvalidParameter(
                "mlp needs at least one hidden layer".into(),
            ));
        }
        let mut rng = derive_stream(seed, 0, 0, Purpose::Dataset);
        let mut x = Vec::with_capacity(spec.samples);
        let mut y = Vec::with_capacity(spec.samples);
        for i in 0..spec.samples {
            let label = (i % 2) as f64;
            let theta = rng.random::<f64>() * std::f64::consts::PI;
            let (px, py) = if label == 0.0 {
                (theta.cos(), theta.sin())
            } else {
                (1.0 - theta.cos(), 0.5 - theta.sin())
            };
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            x.push([px + spec.noise * nx, py + spec.noise * ny]);
            let flip = rng.random::<f64>() < spec.label_noise;
            y.push(if flip { 1.0 - label } else { label });
        }
        Self::with_data(&spec.hidden, x, y)
    }

    pub fn with_data(hidden: &[usize], x: Vec<[f64; 2]>, y: Vec<f64>) -> Result<Self> {
        let mut widths = vec![2];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut extents = Vec::new();
        for (l, pair) in widths.windows(2).enumerate() {
            extents.push((format!("w{l}"), pair[0] * pair[1]));
            extents.push((format!("b{l}"), pair[1]));
        }
        Ok(Self {
            layout: Arc::new(LayerLayout::from_extents(extents)?),
            widths,
            x,
            y,
        })
    }

    /// Forward pass keeping every layer's activations; returns the logit.
    fn forward(&self, w: &[f64], input: [f64; 2], acts: &mut Vec<Vec<f64>>) -> f64 {
        acts.clear();
        acts.push(input.to_vec());
        let mut offset = 0;
        let layers = self.widths.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let weights = &w[offset..offset + fan_in * fan_out];
            let bias = &w[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let prev = &acts[l];
            let mut next: Vec<f64> = (0..fan_out)
                .map(|o| {
                    bias[o]
                        + weights[o * fan_in..(o + 1) * fan_in]
                            .iter()
                            .zip(prev)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            if l + 1 < layers {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(next);
        }
        acts[layers][0]
    }
}

impl Model for TinyMlp {
    fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    fn sample_count(&self) -> usize {
        self.y.len()
    }

    fn loss_grad(&self, w: &[f64], batch: &[usize]) -> (f64, Vec<f64>) {
        let inv = 1.0 / batch.len() as f64;
        let layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        let mut g = vec![0.0; w.len()];
        let mut loss = 0.0;
        let mut acts = Vec::new();
        for &i in batch {
            let logit = self.forward(w, self.x[i], &mut acts);
            loss += bce(logit, self.y[i]);
            // dL/d(pre-activation) of the current layer
            let mut delta = vec![(sigmoid(logit) - self.y[i]) * inv];
            for l in (0..layers).rev() {
                let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
                let o = offsets[l];
                let prev = &acts[l];
                for (k, dk) in delta.iter().enumerate() {
                    for (j, pj) in prev.iter().enumerate() {
                        g[o + k * fan_in + j] += dk * pj;
                    }
                    g[o + fan_in * fan_out + k] += dk;
                }
                if l > 0 {
                    let weights = &w[o..o + fan_in * fan_out];
                    delta = (0..fan_in)
                        .map(|j| {
                            let back: f64 = delta
                                .iter()
                                .enumerate()
                                .map(|(k, dk)| dk * weights[k * fan_in + j])
                                .sum();
                            back * (1.0 - prev[j] * prev[j])
                        })
                        .collect();
                }
            }
        }
        (loss * inv, g)
    }

    fn metric(&self, w: &[f64]) -> f64 {
        let mut acts = Vec::new();
        accuracy((0..self.y.len()).map(|i| (self.forward(w, self.x[i], &mut acts), self.y[i])))
    }

    /// Glorot-uniform weights, zero biases.
    fn init_weights(&self, seed: u64) -> Vec<f32> {
        let mut rng = derive_stream(seed, 0, 0, Purpose::Init);
        let mut w = Vec::with_capacity(self.layout.len());
        for pair in self.widths.windows(2) {
            let limit = (6.0 / (pair[0] + pair[1]) as f64).sqrt();
            for _ in 0..pair[0] * pair[1] {
                w.push(rng.random_range(-limit..limit) as f32);
            }
            w.extend(std::iter::repeat_n(0.0f32, pair[1]));
        }
        w
    }
}
