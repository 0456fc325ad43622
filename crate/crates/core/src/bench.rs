//! Wall-clock scaling of the neural and cokriging pipelines.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, Bounds};
use crate::cokriging::{fit_mle, initial_matern, CokrigingModel, MleConfig};
use crate::covariance::{CovarianceModel, MaternParams};
use crate::deepkriging::{fit, FitConfig, Profile};
use crate::error::{Error, Result};
use crate::optim::SimplexConfig;
use crate::rng;
use crate::simulate::{generate, ScenarioConfig, ScenarioKind, SiteLayout};
use crate::spatial::BivariateObservations;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Deepkriging,
    Cokriging,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Deepkriging => "deepkriging",
            BenchMethod::Cokriging => "cokriging",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "all_methods")]
    pub methods: Vec<BenchMethod>,
    /// Training sizes, ascending.
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "sim_profile")]
    pub profile: Profile,
    /// Timed runs per size; the median is reported.
    #[serde(default = "three")]
    pub repeats: usize,
    /// Run once untimed before measuring.
    #[serde(default = "yes")]
    pub warmup: bool,
    /// A size whose first run exceeds this is censored together with
    /// every larger size.
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Likelihood evaluations granted to the cokriging parameter search.
    #[serde(default = "default_mle_evals")]
    pub mle_evals: usize,
    /// Prediction sites per training site.
    #[serde(default = "half")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn all_methods() -> Vec<BenchMethod> {
    vec![BenchMethod::Deepkriging, BenchMethod::Cokriging]
}
fn default_sizes() -> Vec<usize> {
    vec![200, 400, 800, 1600]
}
fn sim_profile() -> Profile {
    Profile::Sim
}
fn three() -> usize {
    3
}
fn yes() -> bool {
    true
}
fn default_timeout() -> f64 {
    600.0
}
fn default_mle_evals() -> usize {
    20
}
fn half() -> f64 {
    0.5
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            methods: all_methods(),
            sizes: default_sizes(),
            profile: Profile::Sim,
            repeats: 3,
            warmup: true,
            timeout_secs: default_timeout(),
            mle_evals: default_mle_evals(),
            test_fraction: half(),
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("sizes must be strictly ascending, got {:?}", self.sizes)));
        }
        if self.sizes[0] < 10 {
            return Err(Error::Config("sizes must be >= 10".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("timeout_secs must be > 0".into()));
        }
        if self.mle_evals == 0 {
            return Err(Error::Config("mle_evals must be >= 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction <= 4.0) {
            return Err(Error::Config("test_fraction must be in (0, 4]".into()));
        }
        Ok(())
    }

    fn n_test(&self, n: usize) -> usize {
        ((n as f64 * self.test_fraction).round() as usize).max(1)
    }
}

/// Timing of one method at one size. `seconds` is `None` when censored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: BenchMethod,
    pub n: usize,
    pub seconds: Option<f64>,
    pub runs: Vec<f64>,
    /// Median epochs and seconds per epoch of the neural fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub workers: usize,
    pub rows: Vec<BenchRow>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Least-squares slope of `ln y` on `ln x`; `None` with fewer than two points.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

impl BenchTable {
    pub fn rows_for(&self, m: BenchMethod) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.method == m)
    }

    pub fn seconds_at(&self, m: BenchMethod, n: usize) -> Option<f64> {
        self.rows_for(m).find(|r| r.n == n).and_then(|r| r.seconds)
    }

    /// Slope of total time against `N`.
    pub fn slope(&self, m: BenchMethod) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self.rows_for(m).filter_map(|r| Some((r.n as f64, r.seconds?))).collect();
        loglog_slope(&pts)
    }

    /// Slope of the per-epoch time of the neural fit.
    pub fn epoch_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows_for(BenchMethod::Deepkriging)
            .filter_map(|r| Some((r.n as f64, r.epoch_seconds?)))
            .collect();
        loglog_slope(&pts)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "n", "workers", "seconds", "censored", "epochs", "epoch_seconds"])?;
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.method.name().to_string(),
                r.n.to_string(),
                self.workers.to_string(),
                f(r.seconds),
                r.seconds.is_none().to_string(),
                f(r.epochs),
                f(r.epoch_seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Whitespace-separated `n seconds` blocks per method, for gnuplot.
    pub fn write_dat<W: Write>(&self, mut w: W) -> Result<()> {
        for m in [BenchMethod::Deepkriging, BenchMethod::Cokriging] {
            if self.rows_for(m).next().is_none() {
                continue;
            }
            writeln!(w, "# {}", m.name())?;
            for r in self.rows_for(m) {
                if let Some(s) = r.seconds {
                    writeln!(w, "{} {}", r.n, s)?;
                }
            }
            writeln!(w)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn format_table(&self) -> String {
        let mut out = format!("workers: {}\n{:<12} {:>6} {:>12} {:>8} {:>12}\n", self.workers, "method", "n", "seconds", "epochs", "s/epoch");
        for r in &self.rows {
            let s = r.seconds.map(|s| format!("{s:.3}")).unwrap_or_else(|| "censored".into());
            let e = r.epochs.map(|e| format!("{e:.0}")).unwrap_or_else(|| "-".into());
            let pe = r.epoch_seconds.map(|e| format!("{e:.5}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!("{:<12} {:>6} {:>12} {:>8} {:>12}\n", r.method.name(), r.n, s, e, pe));
        }
        for m in [BenchMethod::Deepkriging, BenchMethod::Cokriging] {
            if let Some(s) = self.slope(m) {
                out.push_str(&format!("log-log slope {}: {s:.3}\n", m.name()));
            }
        }
        if let Some(s) = self.epoch_slope() {
            out.push_str(&format!("log-log slope deepkriging per epoch: {s:.3}\n"));
        }
        out
    }
}

/// Training and prediction data of one benchmark size: a Gaussian
/// bivariate Matérn field on uniform random sites.
pub fn bench_data(n: usize, n_test: usize, seed: u64) -> Result<(BivariateObservations, BivariateObservations)> {
    let cfg = ScenarioConfig {
        kind: ScenarioKind::Gaussian,
        sites: SiteLayout::Random {
            n: n + n_test,
            bounds: Bounds::UNIT,
        },
        model: CovarianceModel::matern(MaternParams::simulation_default()),
        tukey: None,
        residual_variance: 0.0,
        seed: rng::derive(seed, n as u64),
        replicates: 1,
    };
    let all = generate(&cfg)?.remove(0);
    let train: Vec<usize> = (0..n).collect();
    let test: Vec<usize> = (n..n + n_test).collect();
    Ok((all.subset(&train)?, all.subset(&test)?))
}

/// Runs one timed workload; returns the epochs trained, if any.
fn run_once(
    method: BenchMethod,
    cfg: &BenchConfig,
    train: &BivariateObservations,
    test: &BivariateObservations,
) -> Result<Option<usize>> {
    match method {
        BenchMethod::Deepkriging => {
            let fit_cfg = FitConfig::profile(cfg.profile, BasisConfig::simulation_default(), cfg.seed);
            let (model, reports) = fit(train, None, &fit_cfg)?;
            std::hint::black_box(model.predict(&test.sites, None)?);
            Ok(Some(reports.iter().map(|r| r.epochs_run()).sum()))
        }
        BenchMethod::Cokriging => {
            let mle = MleConfig {
                simplex: SimplexConfig {
                    max_evals: cfg.mle_evals,
                    ..SimplexConfig::default()
                },
                subsample: None,
                fit_nugget: true,
                seed: cfg.seed,
            };
            let est = fit_mle(&initial_matern(train), train, None, &mle)?;
            let model = CokrigingModel::fit(&est.model, train, None)?;
            std::hint::black_box(model.predict(&test.sites, None)?);
            Ok(None)
        }
    }
}

/// Times one method over the configured sizes on the current thread pool.
pub fn bench_scaling(method: BenchMethod, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let timeout = Duration::from_secs_f64(cfg.timeout_secs);
    let mut rows = Vec::with_capacity(cfg.sizes.len());
    let mut censored = false;
    for &n in &cfg.sizes {
        let censor = |n| BenchRow {
            method,
            n,
            seconds: None,
            runs: Vec::new(),
            epochs: None,
            epoch_seconds: None,
        };
        if censored {
            rows.push(censor(n));
            continue;
        }
        let (train, test) = bench_data(n, cfg.n_test(n), cfg.seed)?;
        let mut runs = Vec::with_capacity(cfg.repeats);
        let mut epochs = Vec::new();
        let total = cfg.repeats + usize::from(cfg.warmup);
        for k in 0..total {
            let t = Instant::now();
            let e = run_once(method, cfg, &train, &test)?;
            let dt = t.elapsed();
            if k == 0 && dt > timeout {
                log::warn!("{} at N = {n} took {:.1} s; censoring from here", method.name(), dt.as_secs_f64());
                censored = true;
                break;
            }
            if cfg.warmup && k == 0 {
                continue;
            }
            runs.push(dt.as_secs_f64());
            if let Some(e) = e {
                epochs.push(e as f64);
            }
        }
        if censored {
            rows.push(censor(n));
            continue;
        }
        let seconds = median(&mut runs.clone());
        let epochs = (!epochs.is_empty()).then(|| median(&mut epochs));
        rows.push(BenchRow {
            method,
            n,
            seconds: Some(seconds),
            runs,
            epochs,
            epoch_seconds: epochs.filter(|e| *e > 0.0).map(|e| seconds / e),
        });
        log::info!("{} N = {n}: {seconds:.3} s", method.name());
    }
    Ok(rows)
}

/// Every configured method, in configuration order.
pub fn run(cfg: &BenchConfig) -> Result<BenchTable> {
    let mut rows = Vec::new();
    for &m in &cfg.methods {
        rows.extend(bench_scaling(m, cfg)?);
    }
    Ok(BenchTable {
        workers: rayon::current_num_threads(),
        rows,
    })
}
