//! Dense feedforward networks trained by minibatch backpropagation.
//!
//! Batches are held feature-major (`dim x batch`), so each layer is one
//! matrix product `W A + b`. The loss is the weighted mean squared error
//! averaged over outputs, plus L1/L2 penalties on selected weight matrices.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regularizer {
    pub l1: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularizer: Option<Regularizer>,
    #[serde(default)]
    pub frozen: bool,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
            regularizer: None,
            frozen: false,
        }
    }

    pub fn regularized(mut self, l1: f64, l2: f64) -> Self {
        self.regularizer = Some(Regularizer { l1, l2 });
        self
    }
}

/// Chains hidden widths into layer specs: ReLU on every hidden layer, an
/// identity output layer, and `reg` on the first `n_reg` layers.
pub fn dense_stack(input_dim: usize, widths: &[usize], reg: Option<Regularizer>, n_reg: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(widths.len());
    let mut prev = input_dim;
    for (i, &w) in widths.iter().enumerate() {
        let act = if i + 1 == widths.len() { Activation::Identity } else { Activation::Relu };
        let mut spec = LayerSpec::new(prev, w, act);
        if i < n_reg {
            spec.regularizer = reg;
        }
        specs.push(spec);
        prev = w;
    }
    specs
}

/// Weight initialization. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Init {
    /// Zero-mean normal; `std` defaults to `sqrt(2 / in_dim)`.
    Normal {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        std: Option<f64>,
    },
    Uniform { a: f64, b: f64 },
}

impl Default for Init {
    fn default() -> Self {
        Init::Normal { std: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `out_dim x in_dim`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn penalty(&self) -> f64 {
        match self.spec.regularizer {
            Some(r) => {
                r.l1 * self.weights.iter().map(|w| w.abs()).sum::<f64>()
                    + r.l2 * self.weights.iter().map(|w| w * w).sum::<f64>()
            }
            None => 0.0,
        }
    }

    #[inline]
    fn apply(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights * a;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        if self.spec.activation == Activation::Relu {
            z.apply(|v| {
                if *v < 0.0 {
                    *v = 0.0
                }
            });
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    let last = specs.last().ok_or_else(|| Error::Config("network needs at least one layer".into()))?;
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::Config(format!("layer {i} has a zero dimension")));
        }
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return Err(Error::Config(format!(
                "layer {i} expects {} inputs but layer {} produces {}",
                s.in_dim,
                i - 1,
                specs[i - 1].out_dim
            )));
        }
        if let Some(r) = s.regularizer {
            if !(r.l1 >= 0.0 && r.l2 >= 0.0 && r.l1.is_finite() && r.l2.is_finite()) {
                return Err(Error::Config(format!("layer {i} has a negative or non-finite penalty")));
            }
        }
    }
    if last.activation != Activation::Identity {
        return Err(Error::Config("the output layer must use the identity activation".into()));
    }
    Ok(())
}

impl Network {
    pub fn new(specs: &[LayerSpec], init: Init, seed: u64) -> Result<Self> {
        validate_specs(specs)?;
        let mut r = rng::from_seed(seed);
        let layers = specs
            .iter()
            .map(|s| {
                let weights = DMatrix::from_fn(s.out_dim, s.in_dim, |_, _| match init {
                    Init::Normal { std } => {
                        let sd = std.unwrap_or_else(|| (2.0 / s.in_dim as f64).sqrt());
                        sd * r.sample::<f64, _>(StandardNormal)
                    }
                    Init::Uniform { a, b } => a + (b - a) * r.random::<f64>(),
                });
                Layer {
                    spec: *s,
                    weights,
                    bias: DVector::zeros(s.out_dim),
                }
            })
            .collect();
        Ok(Network { layers })
    }

    /// Rebuilds a network from explicit parameters.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<_> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        for (i, l) in layers.iter().enumerate() {
            if l.weights.shape() != (l.spec.out_dim, l.spec.in_dim) || l.bias.len() != l.spec.out_dim {
                return Err(Error::Format(format!("layer {i} parameters do not match its shape")));
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Network { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.spec.out_dim).unwrap_or(0)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Freezes the first `count` layers and unfreezes the rest.
    pub fn freeze_prefix(&mut self, count: usize) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.spec.frozen = i < count;
        }
    }

    /// Number of weights and biases in unfrozen layers.
    pub fn trainable_params(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !l.spec.frozen)
            .map(|l| l.spec.out_dim * (l.spec.in_dim + 1))
            .sum()
    }

    pub fn penalty(&self) -> f64 {
        self.layers.iter().map(Layer::penalty).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Argument(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let out = self.forward_cols(&DMatrix::from_column_slice(x.len(), 1, x));
        Ok(out.as_slice().to_vec())
    }

    /// Forward pass on `dim x n` inputs, returning `out_dim x n`.
    pub fn forward_cols(&self, xt: &DMatrix<f64>) -> DMatrix<f64> {
        forward_range(&self.layers, xt)
    }

    /// Forward pass on `n x dim` rows, returning `n x out_dim`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Argument(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(self.forward_cols(&x.transpose()).transpose())
    }
}

fn forward_range(layers: &[Layer], xt: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = xt.clone();
    for l in layers {
        a = l.apply(&a);
    }
    a
}

/// Per-output weights of the squared error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub Vec<f64>);

impl LossWeights {
    pub fn uniform(n: usize) -> Self {
        LossWeights(vec![1.0; n])
    }

    /// Inverse sample variances of the target columns; a column with zero
    /// variance gets weight 1.
    pub fn inverse_variance(targets: &DMatrix<f64>) -> Self {
        let n = targets.nrows();
        let w = targets
            .column_iter()
            .enumerate()
            .map(|(u, col)| {
                let var = if n > 1 { col.variance() * n as f64 / (n - 1) as f64 } else { 0.0 };
                if var > 0.0 && var.is_finite() {
                    1.0 / var
                } else {
                    log::warn!("target {} has zero variance; using loss weight 1", u + 1);
                    1.0
                }
            })
            .collect();
        LossWeights(w)
    }

    fn validate(&self, outputs: usize) -> Result<()> {
        if self.0.len() != outputs {
            return Err(Error::Argument(format!(
                "{} loss weights for {} outputs",
                self.0.len(),
                outputs
            )));
        }
        if self.0.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Argument("loss weights must be positive".into()));
        }
        Ok(())
    }
}

/// Gradient of the loss with respect to every layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
}

fn check_batch(net: &Network, x: &DMatrix<f64>, y: &DMatrix<f64>, w: &LossWeights) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::Argument(format!("{} inputs but {} targets", x.nrows(), y.nrows())));
    }
    if x.ncols() != net.input_dim() || y.ncols() != net.output_dim() {
        return Err(Error::Argument(format!(
            "batch is {} -> {}, network is {} -> {}",
            x.ncols(),
            y.ncols(),
            net.input_dim(),
            net.output_dim()
        )));
    }
    w.validate(net.output_dim())
}

/// Data term of the loss on feature-major predictions and targets.
fn data_loss(pred: &DMatrix<f64>, yt: &DMatrix<f64>, w: &[f64]) -> f64 {
    let (u, n) = pred.shape();
    let mut total = 0.0;
    for j in 0..n {
        for i in 0..u {
            let r = pred[(i, j)] - yt[(i, j)];
            total += w[i] * r * r;
        }
    }
    total / (n * u) as f64
}

/// Loss on `n x dim` inputs and `n x out` targets, penalties included.
pub fn loss(net: &Network, x: &DMatrix<f64>, y: &DMatrix<f64>, w: &LossWeights) -> Result<f64> {
    check_batch(net, x, y, w)?;
    let pred = net.forward_cols(&x.transpose());
    Ok(data_loss(&pred, &y.transpose(), &w.0) + net.penalty())
}

/// Exact gradient of [`loss`]; frozen layers get zero blocks.
pub fn grad(net: &Network, x: &DMatrix<f64>, y: &DMatrix<f64>, w: &LossWeights) -> Result<Gradients> {
    check_batch(net, x, y, w)?;
    let (_, g) = backprop(&net.layers, &x.transpose(), &y.transpose(), &w.0);
    let mut weights = Vec::with_capacity(net.depth());
    let mut bias = Vec::with_capacity(net.depth());
    for (l, g) in net.layers.iter().zip(g) {
        match g {
            Some((gw, gb)) => {
                weights.push(gw);
                bias.push(gb);
            }
            None => {
                weights.push(DMatrix::zeros(l.spec.out_dim, l.spec.in_dim));
                bias.push(DVector::zeros(l.spec.out_dim));
            }
        }
    }
    Ok(Gradients { weights, bias })
}

type LayerGrad = Option<(DMatrix<f64>, DVector<f64>)>;

/// Data loss and gradients for `layers` on feature-major `xt`, `yt`.
/// Penalty gradients are included; frozen layers yield `None` and
/// backpropagation stops below the lowest unfrozen layer.
fn backprop(layers: &[Layer], xt: &DMatrix<f64>, yt: &DMatrix<f64>, w: &[f64]) -> (f64, Vec<LayerGrad>) {
    let depth = layers.len();
    let lowest = layers.iter().position(|l| !l.spec.frozen).unwrap_or(depth);
    let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(depth + 1);
    acts.push(xt.clone());
    for l in layers {
        let a = l.apply(acts.last().expect("nonempty"));
        acts.push(a);
    }
    let pred = &acts[depth];
    let (u, n) = pred.shape();
    let loss = data_loss(pred, yt, w);
    let mut grads: Vec<LayerGrad> = vec![None; depth];
    if lowest == depth {
        return (loss, grads);
    }
    let scale = 2.0 / (n * u) as f64;
    let mut delta = DMatrix::from_fn(u, n, |i, j| scale * w[i] * (pred[(i, j)] - yt[(i, j)]));
    for k in (lowest..depth).rev() {
        let l = &layers[k];
        if l.spec.activation == Activation::Relu {
            delta.zip_apply(&acts[k + 1], |d, a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
        }
        let below = if k > lowest { Some(l.weights.tr_mul(&delta)) } else { None };
        if !l.spec.frozen {
            let mut gw = &delta * acts[k].transpose();
            if let Some(r) = l.spec.regularizer {
                gw.zip_apply(&l.weights, |g, wv| {
                    *g += r.l1 * sign(wv) + 2.0 * r.l2 * wv;
                });
            }
            let gb = delta.column_sum();
            grads[k] = Some((gw, gb));
        }
        match below {
            Some(b) => delta = b,
            None => break,
        }
    }
    (loss, grads)
}

/// Subgradient of `|w|`, zero at zero.
#[inline]
fn sign(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    /// Share of the data held out for monitoring.
    pub validation_fraction: f64,
    /// Roll back to the parameters with the best validation loss.
    #[serde(default = "yes")]
    pub restore_best: bool,
}

fn yes() -> bool {
    true
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            patience: 20,
            min_delta: 1e-5,
            validation_fraction: 0.1,
            restore_best: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<EarlyStop>,
    pub seed: u64,
    #[serde(default)]
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 200,
            optimizer: Optimizer::default(),
            early_stop: Some(EarlyStop::default()),
            seed: 0,
            init: Init::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(es) = &self.early_stop {
            if !(es.validation_fraction > 0.0 && es.validation_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "validation_fraction must lie in (0, 1), got {}",
                    es.validation_fraction
                )));
            }
            if !(es.min_delta >= 0.0) {
                return Err(Error::Config("min_delta must be >= 0".into()));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config("Adam needs betas in [0, 1) and eps > 0".into()));
            }
        }
        match self.init {
            Init::Normal { std: Some(s) } if !(s > 0.0 && s.is_finite()) => {
                Err(Error::Config("init std must be positive".into()))
            }
            Init::Uniform { a, b } if !(a < b && a.is_finite() && b.is_finite()) => {
                Err(Error::Config("uniform init needs a < b".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Loss history of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch, penalties included.
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch when early stopping is on.
    pub val_loss: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept; 0 if none ran.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

struct AdamState {
    m_w: DMatrix<f64>,
    v_w: DMatrix<f64>,
    m_b: DVector<f64>,
    v_b: DVector<f64>,
}

fn gather_cols(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let r = m.nrows();
    let mut data = Vec::with_capacity(r * idx.len());
    let src = m.as_slice();
    for &j in idx {
        data.extend_from_slice(&src[j * r..(j + 1) * r]);
    }
    DMatrix::from_vec(r, idx.len(), data)
}

/// Trains `net` in place on `n x dim` inputs and `n x out` targets.
///
/// A leading run of frozen layers is evaluated once up front and only the
/// remaining layers are iterated. Deterministic given `cfg.seed`.
pub fn train(net: &mut Network, x: &DMatrix<f64>, y: &DMatrix<f64>, w: &LossWeights, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_batch(net, x, y, w)?;
    let mut report = TrainReport::default();
    let prefix = net.layers.iter().take_while(|l| l.spec.frozen).count();
    if cfg.epochs == 0 || prefix == net.depth() {
        return Ok(report);
    }
    let frozen_penalty: f64 = net.layers[..prefix].iter().map(Layer::penalty).sum();
    let input = forward_range(&net.layers[..prefix], &x.transpose());
    let yt = y.transpose();
    let n = x.nrows();

    let mut r = rng::from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let (train_idx, val_idx) = match &cfg.early_stop {
        Some(es) if n >= 2 => {
            order.shuffle(&mut r);
            let n_val = ((es.validation_fraction * n as f64).round() as usize).clamp(1, n - 1);
            (order[n_val..].to_vec(), order[..n_val].to_vec())
        }
        _ => (order, Vec::new()),
    };
    let (val_x, val_y) = if val_idx.is_empty() {
        (None, None)
    } else {
        (Some(gather_cols(&input, &val_idx)), Some(gather_cols(&yt, &val_idx)))
    };

    let tail = &mut net.layers[prefix..];
    let mut state: Vec<AdamState> = tail
        .iter()
        .map(|l| AdamState {
            m_w: DMatrix::zeros(l.spec.out_dim, l.spec.in_dim),
            v_w: DMatrix::zeros(l.spec.out_dim, l.spec.in_dim),
            m_b: DVector::zeros(l.spec.out_dim),
            v_b: DVector::zeros(l.spec.out_dim),
        })
        .collect();
    let mut step = 0i32;
    let mut best: Option<(f64, Vec<Layer>)> = None;
    let mut since_best = 0usize;
    let mut shuffled = train_idx.clone();

    for epoch in 1..=cfg.epochs {
        shuffled.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in shuffled.chunks(cfg.batch_size) {
            let bx = gather_cols(&input, chunk);
            let by = gather_cols(&yt, chunk);
            let (data, grads) = backprop(tail, &bx, &by, &w.0);
            let batch_loss = data + frozen_penalty + tail.iter().map(Layer::penalty).sum::<f64>();
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += batch_loss;
            batches += 1;
            step += 1;
            apply_update(tail, &mut state, grads, cfg, step);
        }
        epoch_loss /= batches as f64;
        report.train_loss.push(epoch_loss);

        if let (Some(vx), Some(vy), Some(es)) = (&val_x, &val_y, &cfg.early_stop) {
            let pred = forward_range(tail, vx);
            let val = data_loss(&pred, vy, &w.0) + frozen_penalty + tail.iter().map(Layer::penalty).sum::<f64>();
            if !val.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            report.val_loss.push(val);
            let improved = match &best {
                Some((b, _)) => val < b - es.min_delta,
                None => true,
            };
            if improved {
                best = Some((val, if es.restore_best { tail.to_vec() } else { Vec::new() }));
                report.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= es.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        } else {
            report.best_epoch = epoch;
        }
    }
    if let (Some((_, layers)), Some(es)) = (best, &cfg.early_stop) {
        if es.restore_best && !layers.is_empty() {
            tail.clone_from_slice(&layers);
        } else {
            report.best_epoch = report.epochs_run();
        }
    }
    Ok(report)
}

fn apply_update(tail: &mut [Layer], state: &mut [AdamState], grads: Vec<LayerGrad>, cfg: &TrainConfig, step: i32) {
    let lr = cfg.learning_rate;
    for ((l, s), g) in tail.iter_mut().zip(state.iter_mut()).zip(grads) {
        let Some((gw, gb)) = g else { continue };
        match cfg.optimizer {
            Optimizer::Sgd => {
                l.weights.zip_apply(&gw, |p, g| *p -= lr * g);
                l.bias.zip_apply(&gb, |p, g| *p -= lr * g);
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(step);
                let c2 = 1.0 - beta2.powi(step);
                let step_size = lr * c2.sqrt() / c1;
                let eps_hat = eps * c2.sqrt();
                adam(l.weights.as_mut_slice(), s.m_w.as_mut_slice(), s.v_w.as_mut_slice(), gw.as_slice(), beta1, beta2, step_size, eps_hat);
                adam(l.bias.as_mut_slice(), s.m_b.as_mut_slice(), s.v_b.as_mut_slice(), gb.as_slice(), beta1, beta2, step_size, eps_hat);
            }
        }
    }
}

/// One Adam step with the bias corrections folded into `step_size` and
/// `eps_hat`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn adam(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], b1: f64, b2: f64, step_size: f64, eps_hat: f64) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        p[i] -= step_size * m[i] / (v[i].sqrt() + eps_hat);
    }
}

pub const NETWORK_FORMAT: &str = "deepkrig-network";
pub const NETWORK_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct LayerRecord {
    spec: LayerSpec,
    /// Row-major `out_dim x in_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Serializable form of a network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRecord {
    layers: Vec<LayerRecord>,
}

impl From<&Network> for NetworkRecord {
    fn from(net: &Network) -> Self {
        NetworkRecord {
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    spec: l.spec,
                    weights: l.weights.transpose().as_slice().to_vec(),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<NetworkRecord> for Network {
    type Error = Error;

    fn try_from(rec: NetworkRecord) -> Result<Self> {
        let layers = rec
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let (o, n) = (l.spec.out_dim, l.spec.in_dim);
                if l.weights.len() != o * n || l.bias.len() != o {
                    return Err(Error::Format(format!("layer {i} parameters do not match its shape")));
                }
                Ok(Layer {
                    spec: l.spec,
                    weights: DMatrix::from_row_slice(o, n, &l.weights),
                    bias: DVector::from_vec(l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::from_layers(layers).map_err(|e| match e {
            Error::Config(m) => Error::Format(m),
            e => e,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    format: String,
    version: u32,
    network: NetworkRecord,
}

/// Checks the `format` and `version` header of a JSON model file before
/// its body is decoded.
pub(crate) fn check_header(value: &serde_json::Value, format: &str, version: u32) -> Result<()> {
    let found_format = value.get("format").and_then(|v| v.as_str());
    if found_format != Some(format) {
        return Err(Error::Format(format!("not a {format} file")));
    }
    let found = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("missing version".into()))?;
    if found != version as u64 {
        return Err(Error::Version {
            found: found.min(u32::MAX as u64) as u32,
            expected: version,
        });
    }
    Ok(())
}

pub(crate) fn parse_json(text: &str) -> Result<serde_json::Value> {
    serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
}

pub fn to_json(net: &Network) -> String {
    let file = NetworkFile {
        format: NETWORK_FORMAT.into(),
        version: NETWORK_VERSION,
        network: net.into(),
    };
    serde_json::to_string(&file).expect("network serializes")
}

pub fn from_json(text: &str) -> Result<Network> {
    let value = parse_json(text)?;
    check_header(&value, NETWORK_FORMAT, NETWORK_VERSION)?;
    let file: NetworkFile = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
    file.network.try_into()
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, to_json(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    from_json(&fs::read_to_string(path).map_err(crate::error::at(path))?)
}
