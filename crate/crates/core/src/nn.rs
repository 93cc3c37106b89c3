//! Fully connected embedding network with batch normalization, exact
//! backpropagation and an Adam update rule.
//!
//! Everything here runs in `f64`. Parameters are laid out per layer as a
//! dense weight matrix of shape `output_dim × input_dim`, a bias vector and,
//! for normalized layers, the batch-norm scale/shift plus running
//! statistics. Layer `k` computes
//!
//! ```text
//! z = x Wᵀ + b
//! y = γ (z − μ) / sqrt(σ² + ε) + β      (batch-norm layers only)
//! out = max(y, 0)                       (ReLU layers only)
//! ```
//!
//! In train mode `μ, σ²` are the (population) statistics of the batch and
//! the running statistics are updated with momentum; in eval mode the running
//! statistics are used and nothing is mutated.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub has_batchnorm: bool,
    pub has_relu: bool,
}

impl LayerSpec {
    /// Dense + batch norm + ReLU.
    pub fn hidden(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            has_batchnorm: true,
            has_relu: true,
        }
    }

    /// Plain affine projection.
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            has_batchnorm: false,
            has_relu: false,
        }
    }
}

/// Builds `input → hidden[0] → … → embedding_dim` with BN+ReLU on every
/// hidden layer and a linear output layer.
pub fn mlp_specs(input_dim: usize, hidden: &[usize], embedding_dim: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input_dim;
    for &width in hidden {
        specs.push(LayerSpec::hidden(prev, width));
        prev = width;
    }
    specs.push(LayerSpec::linear(prev, embedding_dim));
    specs
}

/// The backbone used for the activity model: 80 → 1024 → 512 → 128 → 64 → 128.
pub fn default_specs() -> Vec<LayerSpec> {
    mlp_specs(80, &[1024, 512, 128, 64], 128)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vector,
    pub beta: Vector,
    pub running_mean: Vector,
    pub running_var: Vector,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Vector::ones(dim),
            beta: Vector::zeros(dim),
            running_mean: Vector::zeros(dim),
            running_var: Vector::ones(dim),
            momentum: DEFAULT_BN_MOMENTUM,
            eps: DEFAULT_BN_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `output_dim × input_dim`
    pub weight: Matrix,
    pub bias: Vector,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stats {
    Batch,
    Running,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    x_hat: Option<Matrix>,
    inv_std: Option<Vector>,
    /// Layer output before the ReLU, kept for the activation mask.
    pre_activation: Matrix,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    input: Matrix,
    layers: Vec<LayerCache>,
}

struct ForwardOutput {
    output: Matrix,
    cache: Vec<LayerCache>,
    /// Per BN layer: (batch mean, batch population variance).
    batch_stats: Vec<Option<(Vector, Vector)>>,
}

/// Parameter set of the embedding model plus its batch-norm state.
#[derive(Debug)]
pub struct EmbeddingNetwork {
    layers: Vec<Layer>,
    mode: Mode,
    cache: Option<ForwardCache>,
    version: u64,
}

impl Clone for EmbeddingNetwork {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            mode: self.mode,
            cache: self.cache.clone(),
            version: fresh_version(),
        }
    }
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidNetwork("no layers".into()));
    }
    for (k, s) in specs.iter().enumerate() {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(Error::InvalidNetwork(format!("layer {} has a zero dimension", k + 1)));
        }
    }
    for (k, pair) in specs.windows(2).enumerate() {
        if pair[0].output_dim != pair[1].input_dim {
            return Err(Error::LayerMismatch {
                left: k + 1,
                right: k + 2,
                left_out: pair[0].output_dim,
                right_in: pair[1].input_dim,
            });
        }
    }
    let last = specs.last().expect("non-empty");
    if last.has_batchnorm || last.has_relu {
        return Err(Error::InvalidNetwork(
            "the final layer must be a linear projection (no batch norm, no ReLU)".into(),
        ));
    }
    Ok(())
}

impl EmbeddingNetwork {
    /// Seeded He-uniform weights, zero biases, identity batch norm.
    pub fn new(specs: &[LayerSpec], embedding_dim: usize, seed: u64) -> Result<Self> {
        check_chain(specs)?;
        let out = specs.last().expect("checked").output_dim;
        if out != embedding_dim {
            return Err(Error::InvalidNetwork(format!(
                "final layer outputs {out} features but the embedding dimension is {embedding_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|&spec| {
                let limit = (6.0 / spec.input_dim as f64).sqrt();
                let weight = Matrix::from_shape_fn((spec.output_dim, spec.input_dim), |_| {
                    rng.random_range(-limit..limit)
                });
                Layer {
                    spec,
                    weight,
                    bias: Vector::zeros(spec.output_dim),
                    bn: spec.has_batchnorm.then(|| BatchNorm::new(spec.output_dim)),
                }
            })
            .collect();
        Ok(Self {
            layers,
            mode: Mode::Train,
            cache: None,
            version: fresh_version(),
        })
    }

    /// Rebuilds a network from explicit layers (used by the bundle loader and tests).
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        check_chain(&specs)?;
        for (k, l) in layers.iter().enumerate() {
            let s = l.spec;
            if l.weight.dim() != (s.output_dim, s.input_dim) || l.bias.len() != s.output_dim {
                return Err(Error::Shape(format!("layer {} parameters do not match its spec", k + 1)));
            }
            match (&l.bn, s.has_batchnorm) {
                (Some(bn), true) => {
                    let d = s.output_dim;
                    if bn.gamma.len() != d
                        || bn.beta.len() != d
                        || bn.running_mean.len() != d
                        || bn.running_var.len() != d
                    {
                        return Err(Error::Shape(format!("layer {} batch-norm size mismatch", k + 1)));
                    }
                    if bn.running_var.iter().any(|&v| v < 0.0) {
                        return Err(Error::InvalidNetwork("negative running variance".into()));
                    }
                }
                (None, false) => {}
                _ => {
                    return Err(Error::InvalidNetwork(format!(
                        "layer {} batch-norm parameters disagree with its spec",
                        k + 1
                    )))
                }
            }
        }
        let net = Self {
            layers,
            mode: Mode::Train,
            cache: None,
            version: fresh_version(),
        };
        if !net.is_finite() {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(net)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the raw layers. Any cached forward state is dropped
    /// and the network gets a new version stamp.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.cache = None;
        self.version = fresh_version();
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().expect("non-empty").spec.output_dim
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Identifier that changes whenever parameters or running statistics change.
    /// Clones receive their own identifier.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| l.bn.is_some())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len() + l.bn.as_ref().map_or(0, |b| 2 * b.gamma.len()))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.iter().all(|v| v.is_finite())
                && l.bias.iter().all(|v| v.is_finite())
                && l.bn.as_ref().is_none_or(|b| {
                    b.gamma
                        .iter()
                        .chain(b.beta.iter())
                        .chain(b.running_mean.iter())
                        .chain(b.running_var.iter())
                        .all(|v| v.is_finite())
                })
        })
    }

    /// True when both networks hold identical parameters and running statistics.
    pub fn same_parameters(&self, other: &Self) -> bool {
        self.layers == other.layers
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input batch"));
        }
        Ok(())
    }

    fn forward(&self, x: &Matrix, stats: Stats, keep_cache: bool) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let n = x.nrows();
        if stats == Stats::Batch && self.has_batchnorm() && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let mut cache = Vec::new();
        let mut batch_stats = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            let (y, x_hat, inv_std) = match &layer.bn {
                None => {
                    batch_stats.push(None);
                    (z, None, None)
                }
                Some(bn) => {
                    let (mean, var) = match stats {
                        Stats::Batch => {
                            let mean = z.mean_axis(Axis(0)).expect("n >= 2");
                            let centered = &z - &mean;
                            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("n >= 2");
                            batch_stats.push(Some((mean.clone(), var.clone())));
                            (mean, var)
                        }
                        Stats::Running => {
                            batch_stats.push(None);
                            (bn.running_mean.clone(), bn.running_var.clone())
                        }
                    };
                    let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                    let x_hat = (&z - &mean) * &inv_std;
                    let y = &x_hat * &bn.gamma + &bn.beta;
                    (y, Some(x_hat), Some(inv_std))
                }
            };
            let out = if layer.spec.has_relu {
                y.mapv(|v| v.max(0.0))
            } else {
                y.clone()
            };
            if keep_cache {
                cache.push(LayerCache {
                    input: std::mem::take(&mut h),
                    x_hat,
                    inv_std,
                    pre_activation: y,
                });
            }
            h = out;
        }
        Ok(ForwardOutput {
            output: h,
            cache,
            batch_stats,
        })
    }

    /// Mode-dependent embedding. Train mode uses batch statistics, updates the
    /// running statistics and caches activations for [`Self::gradients`];
    /// eval mode is a pure function of the input.
    pub fn embed_batch(&mut self, batch: &Matrix) -> Result<Matrix> {
        match self.mode {
            Mode::Train => self.forward_train(batch, true),
            Mode::Eval => self.infer(batch),
        }
    }

    /// Train-mode forward pass with an explicit switch for the running-statistics update.
    pub fn forward_train(&mut self, batch: &Matrix, update_running_stats: bool) -> Result<Matrix> {
        let fwd = self.forward(batch, Stats::Batch, true)?;
        let n = batch.nrows() as f64;
        if update_running_stats && self.has_batchnorm() {
            for (layer, stats) in self.layers.iter_mut().zip(&fwd.batch_stats) {
                if let (Some(bn), Some((mean, var))) = (layer.bn.as_mut(), stats) {
                    let m = bn.momentum;
                    let unbiased = var * (n / (n - 1.0));
                    bn.running_mean = &bn.running_mean * (1.0 - m) + mean * m;
                    bn.running_var = &bn.running_var * (1.0 - m) + unbiased * m;
                }
            }
            self.version = fresh_version();
        }
        self.cache = Some(ForwardCache {
            input: batch.clone(),
            layers: fwd.cache,
        });
        Ok(fwd.output)
    }

    /// Eval-mode embedding (running statistics), regardless of the current mode.
    pub fn infer(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch, Stats::Running, false)?.output)
    }

    /// Batch-statistics forward pass that touches no state. Used for the
    /// frozen teacher network during incremental updates.
    pub fn forward_batch_stats(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch, Stats::Batch, false)?.output)
    }

    /// Gradients of `sum(upstream ⊙ embeddings)` with respect to every
    /// trainable parameter, for the batch of the last train-mode forward pass.
    pub fn gradients(&self, batch: &Matrix, upstream: &Matrix) -> Result<GradientSet> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        if cache.input != *batch {
            return Err(Error::NoForwardCache);
        }
        if upstream.dim() != (batch.nrows(), self.embedding_dim()) {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?}, expected ({}, {})",
                upstream.dim(),
                batch.nrows(),
                self.embedding_dim()
            )));
        }
        if upstream.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("upstream gradient"));
        }
        let n = batch.nrows() as f64;
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        let mut d_out = upstream.clone();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            if layer.spec.has_relu {
                Zip::from(&mut d_out)
                    .and(&lc.pre_activation)
                    .for_each(|d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            let (d_z, gamma, beta) = match (&layer.bn, &lc.x_hat, &lc.inv_std) {
                (Some(bn), Some(x_hat), Some(inv_std)) => {
                    let d_gamma = (&d_out * x_hat).sum_axis(Axis(0));
                    let d_beta = d_out.sum_axis(Axis(0));
                    let d_xhat = &d_out * &bn.gamma;
                    let sum_dxhat = d_xhat.sum_axis(Axis(0));
                    let sum_dxhat_xhat = (&d_xhat * x_hat).sum_axis(Axis(0));
                    let d_z = (&d_xhat * n - &sum_dxhat - x_hat * &sum_dxhat_xhat) * &(inv_std / n);
                    (d_z, Some(d_gamma), Some(d_beta))
                }
                _ => (d_out, None, None),
            };
            let weight = d_z.t().dot(&lc.input);
            let bias = d_z.sum_axis(Axis(0));
            d_out = d_z.dot(&layer.weight);
            grads.push(LayerGrad {
                weight,
                bias,
                gamma,
                beta,
            });
        }
        grads.reverse();
        Ok(GradientSet { layers: grads })
    }

    /// One bias-corrected Adam step in place. Non-finite or mis-shaped
    /// gradients are rejected before any parameter is touched.
    pub fn adam_step(&mut self, grads: &GradientSet, state: &mut AdamState, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        let template = GradientSet::zeros_like(self);
        if !grads.congruent(&template) || !state.m.congruent(&template) || !state.v.congruent(&template) {
            return Err(Error::Shape("gradient/optimizer state does not match the network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for ((layer, g), (m, v)) in self
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(state.m.layers.iter_mut().zip(state.v.layers.iter_mut()))
        {
            Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            if let Some(bn) = layer.bn.as_mut() {
                let (gg, gb) = (g.gamma.as_ref().expect("congruent"), g.beta.as_ref().expect("congruent"));
                Zip::from(&mut bn.gamma)
                    .and(gg)
                    .and(m.gamma.as_mut().expect("congruent"))
                    .and(v.gamma.as_mut().expect("congruent"))
                    .for_each(|p, &g, m, v| update(p, g, m, v));
                Zip::from(&mut bn.beta)
                    .and(gb)
                    .and(m.beta.as_mut().expect("congruent"))
                    .and(v.beta.as_mut().expect("congruent"))
                    .for_each(|p, &g, m, v| update(p, g, m, v));
            }
        }
        self.cache = None;
        self.version = fresh_version();
        Ok(())
    }

    /// Trainable parameters flattened in a fixed order: per layer the weight
    /// (row-major), bias, then γ and β when present. Matches
    /// [`GradientSet::flatten`].
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
            if let Some(bn) = &l.bn {
                out.extend(bn.gamma.iter());
                out.extend(bn.beta.iter());
            }
        }
        out
    }

    pub fn set_flat_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut it = values.iter().copied();
        for l in self.layers_mut() {
            l.weight.iter_mut().for_each(|p| *p = it.next().expect("len checked"));
            l.bias.iter_mut().for_each(|p| *p = it.next().expect("len checked"));
            if let Some(bn) = l.bn.as_mut() {
                bn.gamma.iter_mut().for_each(|p| *p = it.next().expect("len checked"));
                bn.beta.iter_mut().for_each(|p| *p = it.next().expect("len checked"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vector,
    pub gamma: Option<Vector>,
    pub beta: Option<Vector>,
}

/// One gradient tensor per trainable parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(net: &EmbeddingNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.weight.raw_dim()),
                    bias: Vector::zeros(l.bias.len()),
                    gamma: l.bn.as_ref().map(|b| Vector::zeros(b.gamma.len())),
                    beta: l.bn.as_ref().map(|b| Vector::zeros(b.beta.len())),
                })
                .collect(),
        }
    }

    pub fn congruent(&self, other: &Self) -> bool {
        let same_opt = |a: &Option<Vector>, b: &Option<Vector>| match (a, b) {
            (Some(a), Some(b)) => a.len() == b.len(),
            (None, None) => true,
            _ => false,
        };
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.dim() == b.weight.dim()
                    && a.bias.len() == b.bias.len()
                    && same_opt(&a.gamma, &b.gamma)
                    && same_opt(&a.beta, &b.beta)
            })
    }

    fn tensors(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| {
            l.weight
                .iter()
                .chain(l.bias.iter())
                .chain(l.gamma.iter().flat_map(|g| g.iter()))
                .chain(l.beta.iter().flat_map(|b| b.iter()))
                .copied()
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(f64::is_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().all(|v| v == 0.0)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().collect()
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        debug_assert!(self.congruent(other));
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(factor, &b.weight);
            a.bias.scaled_add(factor, &b.bias);
            if let (Some(x), Some(y)) = (a.gamma.as_mut(), b.gamma.as_ref()) {
                x.scaled_add(factor, y);
            }
            if let (Some(x), Some(y)) = (a.beta.as_mut(), b.beta.as_ref()) {
                x.scaled_add(factor, y);
            }
        }
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &EmbeddingNetwork) -> Self {
        Self::with_hyper(net, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(net: &EmbeddingNetwork, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: GradientSet::zeros_like(net),
            v: GradientSet::zeros_like(net),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}
