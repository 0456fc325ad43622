//! Basis-embedded neural prediction of two spatial variables.
//!
//! Sites are mapped to multiresolution Wendland features (plus an intercept
//! and standardized covariates) and a dense network is trained to output
//! both variables jointly. The loss weights each variable by its inverse
//! sample variance; internally this is done by training on standardized
//! targets, which gives the same objective.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, Embedder, FeatureMatrix};
use crate::error::{Error, Result};
use crate::nn::{self, Init, LayerSpec, LossWeights, Network, NetworkRecord, Regularizer, TrainConfig, TrainReport};
use crate::rng;
use crate::spatial::{BivariateObservations, SiteSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One network with two outputs.
    #[default]
    Bivariate,
    /// Two single-output networks of the same shape.
    Independent,
}

/// Hidden-layer widths and penalties; the output layer is added to match
/// the mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularizer: Option<Regularizer>,
    /// Penalize this many leading layers.
    #[serde(default)]
    pub regularized_layers: usize,
}

/// Named setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Four 100-unit layers and one 50-unit layer before the output.
    Sim,
    /// As `sim` with a second 50-unit layer and uniform initialization.
    Wind,
}

impl Profile {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sim" => Ok(Profile::Sim),
            "wind" => Ok(Profile::Wind),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected sim or wind)"))),
        }
    }

    pub fn architecture(self) -> Architecture {
        let hidden = match self {
            Profile::Sim => vec![100, 100, 100, 100, 50],
            Profile::Wind => vec![100, 100, 100, 100, 50, 50],
        };
        // An L1L2 penalty of 0.01 on the first two layers outweighs the
        // data term at simulation scale and roughly doubles the test error,
        // so the simulation profile trains unpenalized.
        let regularizer = match self {
            Profile::Sim => None,
            Profile::Wind => Some(Regularizer { l1: 0.01, l2: 0.01 }),
        };
        Architecture {
            hidden,
            regularizer,
            regularized_layers: if regularizer.is_some() { 2 } else { 0 },
        }
    }

    pub fn train_config(self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
        if self == Profile::Wind {
            cfg.init = Init::Uniform { a: -0.05, b: 0.05 };
        }
        cfg
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if self.regularized_layers > self.hidden.len() + 1 {
            return Err(Error::Config(format!(
                "regularized_layers = {} exceeds the {} layers",
                self.regularized_layers,
                self.hidden.len() + 1
            )));
        }
        Ok(())
    }

    /// Total layer count including the output layer.
    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn layers(&self, input_dim: usize, outputs: usize) -> Vec<LayerSpec> {
        let mut widths = self.hidden.clone();
        widths.push(outputs);
        nn::dense_stack(input_dim, &widths, self.regularizer, self.regularized_layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub basis: BasisConfig,
    pub architecture: Architecture,
    pub train: TrainConfig,
    #[serde(default)]
    pub mode: Mode,
    /// Append a constant column to the features.
    #[serde(default = "yes")]
    pub intercept: bool,
}

fn yes() -> bool {
    true
}

impl FitConfig {
    pub fn profile(profile: Profile, basis: BasisConfig, seed: u64) -> Self {
        FitConfig {
            basis,
            architecture: profile.architecture(),
            train: profile.train_config(seed),
            mode: Mode::Bivariate,
            intercept: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.basis.validate()?;
        self.architecture.validate()?;
        self.train.validate()
    }
}

/// Column means and standard deviations used to z-score inputs or targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    /// Column statistics with divisor `n - 1`; constant columns get sd 1.
    pub fn fit(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut mean = Vec::with_capacity(m.ncols());
        let mut sd = Vec::with_capacity(m.ncols());
        for col in m.column_iter() {
            let mu = col.mean();
            let var = if n > 1 {
                col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            mean.push(mu);
            sd.push(if var > 0.0 && var.is_finite() { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, sd }
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - self.mean[j]) / self.sd[j])
    }

    pub fn invert(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| self.mean[j] + self.sd[j] * m[(i, j)])
    }
}

#[derive(Debug, Clone)]
pub struct DeepKrigingModel {
    pub basis: BasisConfig,
    pub mode: Mode,
    pub intercept: bool,
    /// One network in bivariate mode, two in independent mode.
    pub nets: Vec<Network>,
    /// Inverse sample variances of the training targets.
    pub loss_weights: LossWeights,
    pub targets: Standardizer,
    pub covariates: Option<Standardizer>,
    embedder: Embedder,
}

impl PartialEq for DeepKrigingModel {
    fn eq(&self, other: &Self) -> bool {
        self.basis == other.basis
            && self.mode == other.mode
            && self.intercept == other.intercept
            && self.nets == other.nets
            && self.loss_weights == other.loss_weights
            && self.targets == other.targets
            && self.covariates == other.covariates
    }
}

pub(crate) fn targets_of(obs: &BivariateObservations) -> DMatrix<f64> {
    let n = obs.len();
    DMatrix::from_fn(n, 2, |i, u| if u == 0 { obs.z1[i] } else { obs.z2[i] })
}

/// Feature rows for `sites`: basis values, then the intercept, then
/// standardized covariates.
fn features(
    embedder: &Embedder,
    sites: &SiteSet,
    intercept: bool,
    covariates: Option<&DMatrix<f64>>,
    stats: Option<&Standardizer>,
) -> Result<FeatureMatrix> {
    let n = sites.len();
    let extra = match (covariates, stats) {
        (Some(c), Some(s)) => {
            if c.ncols() != s.mean.len() {
                return Err(Error::Schema(format!(
                    "{} covariate columns given, model was trained with {}",
                    c.ncols(),
                    s.mean.len()
                )));
            }
            Some(s.apply(c))
        }
        (None, None) => None,
        (Some(c), None) => {
            return Err(Error::Schema(format!(
                "{} covariate columns given, model was trained without covariates",
                c.ncols()
            )))
        }
        (None, Some(s)) => {
            return Err(Error::Schema(format!(
                "model was trained with {} covariate columns, none given",
                s.mean.len()
            )))
        }
    };
    let cols = usize::from(intercept) + extra.as_ref().map_or(0, |m| m.ncols());
    if cols == 0 {
        return embedder.embed(sites, None);
    }
    let mut x = DMatrix::from_element(n, cols, 1.0);
    if let Some(m) = extra {
        let off = usize::from(intercept);
        x.columns_mut(off, m.ncols()).copy_from(&m);
    }
    embedder.embed(sites, Some(&x))
}

/// Trains a model; returns the training history of each network.
pub fn fit(
    train: &BivariateObservations,
    covariates: Option<&DMatrix<f64>>,
    cfg: &FitConfig,
) -> Result<(DeepKrigingModel, Vec<TrainReport>)> {
    cfg.validate()?;
    let embedder = Embedder::new(&cfg.basis)?;
    let cov_stats = covariates.map(Standardizer::fit);
    let x = features(&embedder, &train.sites, cfg.intercept, covariates, cov_stats.as_ref())?;
    let y = targets_of(train);
    let loss_weights = LossWeights::inverse_variance(&y);
    let targets = Standardizer::fit(&y);
    let ys = targets.apply(&y);

    let mut nets = Vec::new();
    let mut reports = Vec::new();
    match cfg.mode {
        Mode::Bivariate => {
            let (net, rep) = fit_network(&x.data, &ys, &cfg.architecture, &cfg.train, 0)?;
            nets.push(net);
            reports.push(rep);
        }
        Mode::Independent => {
            for u in 0..2 {
                let yu = ys.columns(u, 1).into_owned();
                let (net, rep) = fit_network(&x.data, &yu, &cfg.architecture, &cfg.train, u as u64 + 1)?;
                nets.push(net);
                reports.push(rep);
            }
        }
    }
    let model = DeepKrigingModel {
        basis: cfg.basis.clone(),
        mode: cfg.mode,
        intercept: cfg.intercept,
        nets,
        loss_weights,
        targets,
        covariates: cov_stats,
        embedder,
    };
    Ok((model, reports))
}

/// Initializes and trains one network on standardized targets.
pub(crate) fn fit_network(
    x: &DMatrix<f64>,
    ys: &DMatrix<f64>,
    arch: &Architecture,
    train: &TrainConfig,
    stream: u64,
) -> Result<(Network, TrainReport)> {
    let specs = arch.layers(x.ncols(), ys.ncols());
    let mut net = Network::new(&specs, train.init, rng::derive(train.seed, 1000 + stream))?;
    // start from the target mean
    if let Some(last) = net.layers.last_mut() {
        last.weights.fill(0.0);
    }
    let cfg = TrainConfig {
        seed: rng::derive(train.seed, 2000 + stream),
        ..train.clone()
    };
    let rep = nn::train(&mut net, x, ys, &LossWeights::uniform(ys.ncols()), &cfg)?;
    Ok((net, rep))
}

impl DeepKrigingModel {
    pub fn n_features(&self) -> usize {
        self.nets[0].input_dim()
    }

    /// Feature rows for prediction sites.
    pub fn features(&self, sites: &SiteSet, covariates: Option<&DMatrix<f64>>) -> Result<FeatureMatrix> {
        features(&self.embedder, sites, self.intercept, covariates, self.covariates.as_ref())
    }

    /// Standardized network outputs, `n x 2`.
    pub(crate) fn raw_outputs(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.raw_outputs_with(&self.nets, x)
    }

    /// As `raw_outputs` but through other networks of the same layout.
    pub(crate) fn raw_outputs_with(&self, nets: &[Network], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.mode {
            Mode::Bivariate => nets[0].predict(x),
            Mode::Independent => {
                let a = nets[0].predict(x)?;
                let b = nets[1].predict(x)?;
                Ok(DMatrix::from_fn(x.nrows(), 2, |i, u| if u == 0 { a[(i, 0)] } else { b[(i, 0)] }))
            }
        }
    }

    /// Predictions on the original scale, `n x 2`, from feature rows.
    pub fn predict_features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.targets.invert(&self.raw_outputs(x)?))
    }

    pub fn predict(&self, sites: &SiteSet, covariates: Option<&DMatrix<f64>>) -> Result<BivariateObservations> {
        let x = self.features(sites, covariates)?;
        let p = self.predict_features(&x.data)?;
        BivariateObservations::new(
            sites.clone(),
            p.column(0).iter().copied().collect(),
            p.column(1).iter().copied().collect(),
        )
    }

    /// Fails with a schema error unless `basis` matches the training basis.
    pub fn check_basis(&self, basis: &BasisConfig) -> Result<()> {
        if *basis != self.basis {
            return Err(Error::Schema("basis configuration differs from the one the model was trained with".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            basis: self.basis.clone(),
            mode: self.mode,
            intercept: self.intercept,
            loss_weights: self.loss_weights.clone(),
            targets: self.targets.clone(),
            covariates: self.covariates.clone(),
            nets: self.nets.iter().map(NetworkRecord::from).collect(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value = nn::parse_json(text)?;
        nn::check_header(&value, MODEL_FORMAT, MODEL_VERSION)?;
        let f: ModelFile = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
        let nets = f.nets.into_iter().map(Network::try_from).collect::<Result<Vec<_>>>()?;
        let expected = match f.mode {
            Mode::Bivariate => (1, 2),
            Mode::Independent => (2, 1),
        };
        if nets.len() != expected.0 || nets.iter().any(|n| n.output_dim() != expected.1) {
            return Err(Error::Format("network count or output width does not match the mode".into()));
        }
        let embedder = Embedder::new(&f.basis).map_err(|e| Error::Format(e.to_string()))?;
        let n_cov = f.covariates.as_ref().map_or(0, |c| c.mean.len());
        let n_in = embedder.n_basis() + usize::from(f.intercept) + n_cov;
        if nets.iter().any(|n| n.input_dim() != n_in) {
            return Err(Error::Format(format!("networks do not take the {n_in} features the basis defines")));
        }
        Ok(DeepKrigingModel {
            basis: f.basis,
            mode: f.mode,
            intercept: f.intercept,
            nets,
            loss_weights: f.loss_weights,
            targets: f.targets,
            covariates: f.covariates,
            embedder,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(crate::error::at(path))?)
    }
}

pub const MODEL_FORMAT: &str = "deepkrig-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    basis: BasisConfig,
    mode: Mode,
    intercept: bool,
    loss_weights: LossWeights,
    targets: Standardizer,
    covariates: Option<Standardizer>,
    nets: Vec<NetworkRecord>,
}

/// Outcome of fitting a mixture `A U(s)` of basis-expanded latent fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmcCheckReport {
    /// Largest absolute deviation of the single affine layer's fit.
    pub linear_max_abs: f64,
    pub linear_rmse: f64,
    /// Same for a one-hidden-layer ReLU network started from the affine fit.
    pub deep_max_abs: Option<f64>,
}

/// Training schedule of the LMC check.
fn lmc_train_config(seed: u64, n: usize, epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        batch_size: n,
        epochs,
        early_stop: None,
        seed,
        ..TrainConfig::default()
    }
}

/// Latent fields `U_k(s) = sum_b c_kb phi_b(s)` with seeded standard
/// normal coefficients, mixed as `A U(s)`; returns `(features, targets)`.
pub fn lmc_target(a: &[Vec<f64>; 2], basis: &BasisConfig, sites: &SiteSet, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let r = a[0].len();
    if r == 0 || a[1].len() != r {
        return Err(Error::Argument("mixing matrix must be 2 x r with r >= 1".into()));
    }
    let phi = Embedder::new(basis)?.embed(sites, None)?.data;
    let k = phi.ncols();
    let mut g = rng::from_seed(seed);
    let coef = DMatrix::from_fn(k, r, |_, _| rand::Rng::sample::<f64, _>(&mut g, rand_distr::StandardNormal));
    let latent = &phi * coef;
    let mix = DMatrix::from_fn(r, 2, |kk, u| a[u][kk]);
    Ok((phi, latent * mix))
}

/// Fits `A U(s)` with a single affine layer and, optionally, a ReLU network
/// with one hidden layer; reports the fit errors.
pub fn lmc_equivalence_check(
    a: &[Vec<f64>; 2],
    basis: &BasisConfig,
    sites: &SiteSet,
    seed: u64,
    with_deep: bool,
) -> Result<LmcCheckReport> {
    let (phi, y) = lmc_target(a, basis, sites, seed)?;
    let n = phi.nrows();
    let k = phi.ncols();
    let w = LossWeights::uniform(2);
    let mut linear = Network::new(&[LayerSpec::new(k, 2, nn::Activation::Identity)], Init::default(), seed)?;
    linear.layers[0].weights.fill(0.0);
    // The affine loss is quadratic with Hessian [phi 1]^T [phi 1] / n per
    // output, so full-batch descent with step 1/L converges linearly.
    let design = DMatrix::from_fn(n, k + 1, |i, j| if j < k { phi[(i, j)] } else { 1.0 });
    let top = design.singular_values().max();
    let affine = TrainConfig {
        optimizer: nn::Optimizer::Sgd,
        ..lmc_train_config(seed, n, 4000, n as f64 / (top * top))
    };
    nn::train(&mut linear, &phi, &y, &w, &affine)?;
    let pred = linear.predict(&phi)?;
    let (linear_max_abs, linear_rmse) = errors(&pred, &y);

    let deep_max_abs = if with_deep {
        // Hidden layer [I; 0] passes the nonnegative basis values through
        // the ReLU unchanged, so the network starts at the affine fit.
        let hidden = k + 8;
        let l1 = nn::Layer {
            spec: LayerSpec::new(k, hidden, nn::Activation::Relu),
            weights: DMatrix::from_fn(hidden, k, |i, j| if i == j { 1.0 } else { 0.0 }),
            bias: nalgebra::DVector::zeros(hidden),
        };
        let mut w2 = DMatrix::zeros(2, hidden);
        w2.columns_mut(0, k).copy_from(&linear.layers[0].weights);
        let l2 = nn::Layer {
            spec: LayerSpec::new(hidden, 2, nn::Activation::Identity),
            weights: w2,
            bias: linear.layers[0].bias.clone(),
        };
        let mut deep = Network::from_layers(vec![l1, l2])?;
        let start = nn::loss(&deep, &phi, &y, &w)?;
        let before = deep.clone();
        nn::train(&mut deep, &phi, &y, &w, &lmc_train_config(seed, n, 500, 1e-4))?;
        // keep the better of start and end, as a best-iterate search would
        if nn::loss(&deep, &phi, &y, &w)? > start {
            deep = before;
        }
        Some(errors(&deep.predict(&phi)?, &y).0)
    } else {
        None
    };
    Ok(LmcCheckReport {
        linear_max_abs,
        linear_rmse,
        deep_max_abs,
    })
}

fn errors(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, f64) {
    let d = pred - y;
    let max = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rmse = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
    (max, rmse)
}
