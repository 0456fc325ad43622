//! Run configuration read by the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::BasisConfig;
use crate::bench::BenchConfig;
use crate::cokriging::MleConfig;
use crate::covariance::CovarianceModel;
use crate::deepkriging::{Architecture, FitConfig, Mode, Profile};
use crate::error::{Error, Result};
use crate::nn::{EarlyStop, Init, Optimizer};
use crate::rng;
use crate::simulate::{ScenarioConfig, ScenarioKind, SiteLayout, TukeyGH};
use crate::uncertainty::EnsembleConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Deepkriging,
    Cokriging,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Deepkriging => "deepkriging",
            Method::Cokriging => "cokriging",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSection>,
    #[serde(default)]
    pub paths: Paths,
    /// Defaults to three levels of 25, 81 and 81 knots on the unit square.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisConfig>,
    #[serde(default)]
    pub deepkriging: DeepKrigingSection,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub cokriging: CokrigingSection,
    #[serde(default)]
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Prediction sites; any CSV with `x` and `y` columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
}

impl Paths {
    pub fn require<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| Error::Config(format!("paths.{name} is required for this command")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    #[serde(default = "one")]
    pub replicates: usize,
    /// Defaults to a 40 x 30 grid on the unit square.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<SiteLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<CovarianceModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tukey: Option<[TukeyGH; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_variance: Option<f64>,
    /// Also write a random train/test split of each replicate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
}

fn one() -> usize {
    1
}

impl ScenarioSection {
    pub fn resolve(&self, seed: u64) -> Result<ScenarioConfig> {
        let mut cfg = ScenarioConfig::simulation_default(self.kind, seed, self.replicates);
        if let Some(s) = &self.sites {
            cfg.sites = s.clone();
        }
        if let Some(m) = &self.model {
            cfg.model = m.clone();
        }
        if self.tukey.is_some() {
            cfg.tukey = self.tukey;
        }
        if let Some(v) = self.residual_variance {
            cfg.residual_variance = v;
        }
        if let Some(f) = self.test_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("scenario.test_fraction must lie in (0, 1), got {f}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optional overrides of the profile's training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Optimizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<EarlyStop>,
    /// Turn early stopping off.
    #[serde(default)]
    pub no_early_stop: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Init>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepKrigingSection {
    #[serde(default = "sim")]
    pub profile: Profile,
    #[serde(default)]
    pub mode: Mode,
    /// Replaces the profile's layers and penalties.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "yes")]
    pub intercept: bool,
}

fn sim() -> Profile {
    Profile::Sim
}
fn yes() -> bool {
    true
}

impl Default for DeepKrigingSection {
    fn default() -> Self {
        DeepKrigingSection {
            profile: Profile::Sim,
            mode: Mode::Bivariate,
            architecture: None,
            train: TrainSection::default(),
            intercept: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CokrigingFamily {
    #[default]
    Matern,
    Lmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CokrigingSection {
    #[serde(default)]
    pub family: CokrigingFamily,
    /// Fixed parameters; skips estimation when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<CovarianceModel>,
    #[serde(default)]
    pub mle: MleConfig,
    #[serde(default = "alpha")]
    pub alpha: f64,
}

fn alpha() -> f64 {
    0.05
}

impl Default for CokrigingSection {
    fn default() -> Self {
        CokrigingSection {
            family: CokrigingFamily::Matern,
            model: None,
            mle: MleConfig::default(),
            alpha: alpha(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; schema errors name the offending field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner().message().trim()))
        })
    }

    /// Reads a TOML config, or the resolved config recorded in a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::at(path))?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let cfg = m
                .get("config")
                .ok_or_else(|| Error::Config(format!("{}: no `config` entry", path.display())))?;
            return serde_path_to_error::deserialize(cfg.clone()).map_err(|e| {
                let path = e.path().to_string();
                Error::Config(format!("config.{path}: {}", e.into_inner()))
            });
        }
        Self::from_toml(&text)
    }

    pub fn basis(&self) -> BasisConfig {
        self.basis.clone().unwrap_or_else(BasisConfig::simulation_default)
    }

    pub fn fit_config(&self) -> Result<FitConfig> {
        let dk = &self.deepkriging;
        let mut cfg = FitConfig::profile(dk.profile, self.basis(), rng::derive(self.seed, 11));
        cfg.mode = dk.mode;
        cfg.intercept = dk.intercept;
        if let Some(a) = &dk.architecture {
            cfg.architecture = a.clone();
        }
        let t = &dk.train;
        if let Some(v) = t.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = t.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = t.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = t.optimizer {
            cfg.train.optimizer = v;
        }
        if let Some(v) = t.early_stop {
            cfg.train.early_stop = Some(v);
        }
        if t.no_early_stop {
            cfg.train.early_stop = None;
        }
        if let Some(v) = t.init {
            cfg.train.init = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mle_config(&self) -> MleConfig {
        MleConfig {
            seed: rng::derive(self.seed, 13),
            ..self.cokriging.mle.clone()
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            seed: self.seed,
            ..self.bench.clone()
        }
    }

    /// Checks every section that is present, before any computation.
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.scenario {
            s.resolve(self.seed)?;
        }
        self.fit_config()?;
        self.ensemble.validate()?;
        if let Some(m) = &self.cokriging.model {
            m.validate()?;
        }
        if !(self.cokriging.alpha > 0.0 && self.cokriging.alpha < 1.0) {
            return Err(Error::Config(format!(
                "cokriging.alpha must lie in (0, 1), got {}",
                self.cokriging.alpha
            )));
        }
        self.bench.validate()
    }

    /// Canonical JSON of the resolved config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Annotated example accepted by [`RunConfig::from_toml`].
pub const SCHEMA: &str = r#"# deepkrig run configuration (TOML). Every section is optional; a
# command fails with exit code 2 if something it needs is missing.
# Unknown keys are rejected.

seed = 1                      # base seed; --seed overrides it
method = "deepkriging"        # deepkriging | cokriging

[scenario]                    # simulate
kind = "gaussian"             # gaussian | tukey_gh | nonstationary
replicates = 2
test_fraction = 0.3333333333333333   # optional: also write _train/_test splits
# residual_variance = 0.01    # nonstationary only
# sites = { layout = "grid", nx = 40, ny = 30 }
# sites = { layout = "random", n = 1200 }
# tukey = [{ g = 0.5, h = 1.5 }, { g = -0.4, h = 1.3 }]   # tukey_gh only

# [scenario.model]            # defaults to the flexible bivariate Matérn below
# family = "matern"
# sigma2_1 = 1.0
# sigma2_2 = 1.0
# rho = 0.8
# nu_1 = 0.8
# nu_2 = 0.8
# alpha_1 = 0.1
# alpha_2 = 0.1
# nugget = [0.0, 0.0]

[paths]
train = "data/train.csv"      # x,y,z1,z2
test = "data/test.csv"        # x,y,z1,z2 (evaluate: truth; predict/interval: sites)
# sites = "data/grid.csv"     # x,y[,...] prediction sites
# model = "out/model.json"    # predict, interval (cokriging)
# predictions = "out/predictions.csv"   # evaluate

[basis]                       # Wendland basis levels
levels = [25, 81, 81]         # square grids; or explicit [[x, y], ...] knot lists
bounds = { x_min = 0.0, x_max = 1.0, y_min = 0.0, y_max = 1.0 }
bandwidth = { rule = "scaled", factor = 2.5 }   # or inverse_scaled / explicit

[deepkriging]
profile = "sim"               # sim | wind
mode = "bivariate"            # bivariate | independent
intercept = true
# architecture = { hidden = [100, 100, 100, 100, 50], regularizer = { l1 = 0.01, l2 = 0.01 }, regularized_layers = 2 }   # sim profile default has no penalty

[deepkriging.train]           # overrides of the profile
# learning_rate = 0.01
# batch_size = 32
# epochs = 200
# optimizer = { kind = "adam", beta1 = 0.9, beta2 = 0.999, eps = 1e-8 }
# early_stop = { patience = 20, min_delta = 1e-5, validation_fraction = 0.1 }
# no_early_stop = false
# init = { kind = "uniform", a = -0.05, b = 0.05 }

[ensemble]                    # interval
members = 50
# frozen_layers = 5           # default: all but the output layer
neighbors = 10
alpha = 0.05
base_fraction = 0.5
fit_fraction = 0.5
spread = "centered"           # centered | raw_second_moment

[cokriging]
family = "matern"             # matern | lmc (starting point of the search)
alpha = 0.05
# model = { family = "matern", sigma2_1 = 1.0, ... }   # fixed parameters, no search

[cokriging.mle]
subsample = 300               # optional: estimate on a random subset
fit_nugget = true
simplex = { max_evals = 400, f_tol = 1e-7, x_tol = 1e-5, step = 0.5 }

[bench]
methods = ["deepkriging", "cokriging"]
sizes = [200, 400, 800, 1600]
profile = "sim"
repeats = 3
warmup = true
timeout_secs = 600.0
mle_evals = 20
test_fraction = 0.5
"#;
