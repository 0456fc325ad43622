//! Synthetic bivariate fields: Gaussian, Tukey g-and-h transformed, and a
//! deterministic nonstationary mean plus a small Gaussian residual.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::Bounds;
use crate::covariance::{CovarianceModel, MaternParams};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::rng;
use crate::spatial::{write_observations_file, BivariateObservations, Site, SiteSet};

/// Stream index used to draw random site layouts, kept apart from the
/// replicate streams `0..replicates`.
const SITE_STREAM: u64 = u64::MAX;

/// Draws from a zero-mean bivariate GP on a fixed set of sites.
///
/// The covariance is factored once; each draw is `L xi` for a fresh
/// standard normal `xi`.
#[derive(Debug, Clone)]
pub struct GpSampler {
    sites: SiteSet,
    chol: Cholesky,
}

impl GpSampler {
    pub fn new(model: &CovarianceModel, sites: &SiteSet) -> Result<Self> {
        Ok(GpSampler {
            sites: sites.clone(),
            chol: model.factor(sites)?,
        })
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    pub fn draw(&self, seed: u64) -> Result<BivariateObservations> {
        let n = self.sites.len();
        let mut r = rng::from_seed(seed);
        let xi = DVector::from_iterator(2 * n, (0..2 * n).map(|_| r.sample::<f64, _>(StandardNormal)));
        let z = self.chol.mul_lower(&xi);
        BivariateObservations::new(
            self.sites.clone(),
            z.rows(0, n).iter().copied().collect(),
            z.rows(n, n).iter().copied().collect(),
        )
    }
}

/// One zero-mean GP draw at `sites`.
pub fn sample_gp(model: &CovarianceModel, sites: &SiteSet, seed: u64) -> Result<BivariateObservations> {
    GpSampler::new(model, sites)?.draw(seed)
}

/// Tukey g-and-h parameters for one variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TukeyGH {
    pub g: f64,
    pub h: f64,
}

impl TukeyGH {
    pub fn validate(&self) -> Result<()> {
        if !self.g.is_finite() || !(self.h >= 0.0 && self.h.is_finite()) {
            return Err(Error::Config(format!(
                "Tukey g-and-h needs finite g and h >= 0, got g = {}, h = {}",
                self.g, self.h
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        tukey_gh_unchecked(z, self.g, self.h)
    }
}

/// `(exp(g z) - 1) / g * exp(h z^2 / 2)`, with the `g = 0` limit `z exp(h z^2 / 2)`.
pub fn tukey_gh(z: f64, g: f64, h: f64) -> Result<f64> {
    if !z.is_finite() || !g.is_finite() || !h.is_finite() {
        return Err(Error::Argument(format!("non-finite Tukey input z = {z}, g = {g}, h = {h}")));
    }
    Ok(tukey_gh_unchecked(z, g, h))
}

#[inline]
fn tukey_gh_unchecked(z: f64, g: f64, h: f64) -> f64 {
    let skew = if g == 0.0 { z } else { (g * z).exp_m1() / g };
    skew * (0.5 * h * z * z).exp()
}

/// Deterministic means of the nonstationary scenario, functions of
/// `t = (x + y) / 2 - 0.9`.
pub fn nonstationary_mean(s: &Site) -> (f64, f64) {
    let t = 0.5 * (s.x + s.y) - 0.9;
    let t4 = t.powi(4);
    let m1 = (5.0 * t).sin() * (25.0 * t4).cos() + 0.5 * t;
    let m2 = (2.0 * t).sin() * (30.0 * t4).cos() - 0.5 * t;
    (m1, m2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Gaussian,
    TukeyGh,
    Nonstationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case", deny_unknown_fields)]
pub enum SiteLayout {
    /// Regular `nx x ny` grid including the edges, x varying fastest.
    Grid {
        nx: usize,
        ny: usize,
        #[serde(default = "unit_bounds")]
        bounds: Bounds,
    },
    /// `n` uniform sites drawn from the scenario seed.
    Random {
        n: usize,
        #[serde(default = "unit_bounds")]
        bounds: Bounds,
    },
}

fn unit_bounds() -> Bounds {
    Bounds::UNIT
}

impl SiteLayout {
    pub fn build(&self, seed: u64) -> Result<SiteSet> {
        match self {
            SiteLayout::Grid { nx, ny, bounds } => {
                bounds.validate()?;
                SiteSet::grid(*nx, *ny, (bounds.x_min, bounds.x_max), (bounds.y_min, bounds.y_max))
            }
            SiteLayout::Random { n, bounds } => {
                bounds.validate()?;
                if *n == 0 {
                    return Err(Error::Config("random layout needs n >= 1".into()));
                }
                let mut r = rng::from_seed(rng::derive(seed, SITE_STREAM));
                let sites = (0..*n)
                    .map(|_| {
                        let x = bounds.x_min + (bounds.x_max - bounds.x_min) * r.random::<f64>();
                        let y = bounds.y_min + (bounds.y_max - bounds.y_min) * r.random::<f64>();
                        Site::new(x, y)
                    })
                    .collect::<Result<Vec<_>>>()?;
                SiteSet::new(sites)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub sites: SiteLayout,
    pub model: CovarianceModel,
    /// Per-variable transform; required for `tukey_gh`, rejected otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tukey: Option<[TukeyGH; 2]>,
    /// Marginal variance of the GP residual in the nonstationary scenario.
    #[serde(default = "default_residual_variance")]
    pub residual_variance: f64,
    pub seed: u64,
    pub replicates: usize,
}

fn default_residual_variance() -> f64 {
    0.01
}

impl ScenarioConfig {
    /// 1200 sites on a 40 x 30 grid of the unit square with the default
    /// bivariate Matérn profile.
    pub fn simulation_default(kind: ScenarioKind, seed: u64, replicates: usize) -> Self {
        ScenarioConfig {
            kind,
            sites: SiteLayout::Grid {
                nx: 40,
                ny: 30,
                bounds: Bounds::UNIT,
            },
            model: CovarianceModel::matern(MaternParams::simulation_default()),
            tukey: (kind == ScenarioKind::TukeyGh)
                .then_some([TukeyGH { g: 0.5, h: 1.5 }, TukeyGH { g: -0.4, h: 1.3 }]),
            residual_variance: default_residual_variance(),
            seed,
            replicates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be >= 1".into()));
        }
        match (self.kind, &self.tukey) {
            (ScenarioKind::TukeyGh, Some(t)) => t.iter().try_for_each(TukeyGH::validate)?,
            (ScenarioKind::TukeyGh, None) => {
                return Err(Error::Config("tukey_gh scenario needs tukey parameters".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Config("tukey parameters are only valid for tukey_gh".into()))
            }
            (_, None) => {}
        }
        if !(self.residual_variance >= 0.0 && self.residual_variance.is_finite()) {
            return Err(Error::Config(format!(
                "residual_variance must be >= 0, got {}",
                self.residual_variance
            )));
        }
        Ok(())
    }

    /// Seed of replicate `r`.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        rng::derive(self.seed, r as u64)
    }
}

/// All replicates of a scenario, in replicate order.
pub fn generate(cfg: &ScenarioConfig) -> Result<Vec<BivariateObservations>> {
    cfg.validate()?;
    let sites = cfg.sites.build(cfg.seed)?;
    let sampler = match cfg.kind {
        ScenarioKind::Nonstationary if cfg.residual_variance == 0.0 => None,
        ScenarioKind::Nonstationary => {
            let v = cfg.residual_variance;
            Some(GpSampler::new(&cfg.model.with_marginal_variances([v, v])?, &sites)?)
        }
        _ => Some(GpSampler::new(&cfg.model, &sites)?),
    };
    let means: Option<Vec<(f64, f64)>> = (cfg.kind == ScenarioKind::Nonstationary)
        .then(|| sites.sites().iter().map(nonstationary_mean).collect());

    (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut obs = match &sampler {
                Some(s) => s.draw(cfg.replicate_seed(r))?,
                None => {
                    let n = sites.len();
                    BivariateObservations::new(sites.clone(), vec![0.0; n], vec![0.0; n])?
                }
            };
            if let Some(t) = &cfg.tukey {
                obs.z1.iter_mut().for_each(|z| *z = t[0].apply(*z));
                obs.z2.iter_mut().for_each(|z| *z = t[1].apply(*z));
            }
            if let Some(m) = &means {
                for (i, (m1, m2)) in m.iter().enumerate() {
                    obs.z1[i] += m1;
                    obs.z2[i] += m2;
                }
            }
            Ok(obs)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub config: ScenarioConfig,
    pub files: Vec<String>,
    pub seeds: Vec<u64>,
}

/// Writes `replicate_NNNN.csv` for every replicate and `scenario.json`
/// describing them.
pub fn write_scenario(dir: &Path, cfg: &ScenarioConfig, reps: &[BivariateObservations]) -> Result<ScenarioManifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(reps.len());
    for (r, obs) in reps.iter().enumerate() {
        let name = format!("replicate_{r:04}.csv");
        write_observations_file(obs, &dir.join(&name))?;
        files.push(name);
    }
    let manifest = ScenarioManifest {
        config: cfg.clone(),
        files,
        seeds: (0..reps.len()).map(|r| cfg.replicate_seed(r)).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("scenario.json"), text + "\n")?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{LatentCorrelation, LmcParams};
    use proptest::prelude::*;

    fn white_noise() -> CovarianceModel {
        // vanishing range: off-site correlation underflows to zero
        CovarianceModel::lmc(LmcParams {
            a: [vec![1.0, 0.0], vec![0.0, 1.0]],
            latent: vec![LatentCorrelation { nu: 0.5, alpha: 1e-6 }; 2],
        })
    }

    #[test]
    fn white_noise_variance() {
        let sites = SiteSet::grid(100, 100, (0.0, 1.0), (0.0, 1.0)).unwrap();
        // the factor is the identity, so skip the O(N^3) route
        let n = sites.len();
        let mut r = rng::from_seed(3);
        let z: Vec<f64> = (0..2 * n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        assert!((var(&z[..n]) - 1.0).abs() < 0.05);
        assert!((var(&z[n..]) - 1.0).abs() < 0.05);
        let small = SiteSet::grid(10, 10, (0.0, 1.0), (0.0, 1.0)).unwrap();
        let c = white_noise().assemble(&small).unwrap();
        assert_eq!(c, nalgebra::DMatrix::identity(200, 200));
    }

    #[test]
    fn two_sites_match_dense_oracle() {
        let model = CovarianceModel::matern(MaternParams::simulation_default());
        let sites = SiteSet::from_coords(&[(0.1, 0.2), (0.4, 0.3)]).unwrap();
        let obs = sample_gp(&model, &sites, 11).unwrap();
        let c = model.assemble(&sites).unwrap();
        let l = c.cholesky().unwrap().l();
        let mut r = rng::from_seed(11);
        let xi: Vec<f64> = (0..4).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        for i in 0..4 {
            let expected: f64 = (0..4).map(|k| l[(i, k)] * xi[k]).sum();
            let got = if i < 2 { obs.z1[i] } else { obs.z2[i - 2] };
            assert!((got - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn tukey_examples() {
        assert_eq!(tukey_gh(0.0, 0.5, 1.5).unwrap(), 0.0);
        assert_eq!(tukey_gh(0.0, -0.4, 1.3).unwrap(), 0.0);
        let expected = 2.0 * (0.5f64.exp() - 1.0);
        assert!((tukey_gh(1.0, 0.5, 0.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.29744).abs() < 1e-5);
        for i in 0..=60 {
            let z = -3.0 + 0.1 * i as f64;
            let limit = z * (0.5 * 0.7 * z * z).exp();
            assert!((tukey_gh(z, 1e-9, 0.7).unwrap() - limit).abs() < 1e-6);
            assert_eq!(tukey_gh(z, 0.0, 0.7).unwrap(), limit);
        }
        assert!(tukey_gh(f64::NAN, 0.5, 1.0).is_err());
    }

    #[test]
    fn tukey_is_heavy_tailed() {
        let mut r = rng::from_seed(5);
        let z: Vec<f64> = (0..10_000).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let kurt = |v: &[f64]| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
            m4 / (m2 * m2) - 3.0
        };
        let t: Vec<f64> = z.iter().map(|&x| tukey_gh(x, 0.5, 1.5).unwrap()).collect();
        assert!(kurt(&t) > kurt(&z) + 1.0);
    }

    #[test]
    fn mean_examples() {
        assert_eq!(nonstationary_mean(&Site { x: 0.9, y: 0.9 }), (0.0, 0.0));
        let (m1, _) = nonstationary_mean(&Site { x: 1.9, y: 1.9 });
        assert!((m1 - (5f64.sin() * 25f64.cos() + 0.5)).abs() < 1e-12);
    }

    fn small_cfg(kind: ScenarioKind) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::simulation_default(kind, 42, 2);
        cfg.sites = SiteLayout::Grid {
            nx: 6,
            ny: 5,
            bounds: Bounds::UNIT,
        };
        cfg
    }

    #[test]
    fn generate_is_deterministic() {
        for kind in [ScenarioKind::Gaussian, ScenarioKind::TukeyGh, ScenarioKind::Nonstationary] {
            let cfg = small_cfg(kind);
            let a = generate(&cfg).unwrap();
            let b = generate(&cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 2);
            assert_ne!(a[0].z1, a[1].z1);
        }
    }

    #[test]
    fn tukey_applied_to_gaussian_draw() {
        let g = generate(&small_cfg(ScenarioKind::Gaussian)).unwrap();
        let t = generate(&small_cfg(ScenarioKind::TukeyGh)).unwrap();
        for (zg, zt) in g[1].z2.iter().zip(&t[1].z2) {
            assert_eq!(*zt, tukey_gh(*zg, -0.4, 1.3).unwrap());
        }
    }

    #[test]
    fn zero_residual_gives_mean() {
        let mut cfg = small_cfg(ScenarioKind::Nonstationary);
        cfg.residual_variance = 0.0;
        let out = generate(&cfg).unwrap();
        for (i, s) in out[0].sites.sites().iter().enumerate() {
            let (m1, m2) = nonstationary_mean(s);
            assert_eq!(out[0].z1[i], m1);
            assert_eq!(out[0].z2[i], m2);
        }
    }

    #[test]
    fn tukey_presence_checked() {
        let mut cfg = small_cfg(ScenarioKind::Gaussian);
        cfg.tukey = Some([TukeyGH { g: 0.5, h: 1.5 }; 2]);
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let mut cfg = small_cfg(ScenarioKind::TukeyGh);
        cfg.tukey = None;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn random_layout_in_bounds_and_seeded() {
        let layout = SiteLayout::Random {
            n: 50,
            bounds: Bounds::new(0.0, 2.0, -1.0, 0.0).unwrap(),
        };
        let a = layout.build(9).unwrap();
        assert_eq!(a, layout.build(9).unwrap());
        assert!(a.sites().iter().all(|s| (0.0..=2.0).contains(&s.x) && (-1.0..=0.0).contains(&s.y)));
    }

    #[test]
    fn empirical_covariance_converges() {
        let model = CovarianceModel::matern(MaternParams::simulation_default());
        let sites = SiteSet::from_coords(&[(0.0, 0.0), (0.1, 0.05), (0.3, 0.2)]).unwrap();
        let sampler = GpSampler::new(&model, &sites).unwrap();
        let truth = model.assemble(&sites).unwrap();
        let mut errors = Vec::new();
        // mean error over independent batches, to keep the schedule monotone
        let batches = 16u64;
        for reps in [50usize, 200, 800] {
            let mut total = 0.0;
            for batch in 0..batches {
                let mut emp = nalgebra::DMatrix::zeros(6, 6);
                for r in 0..reps {
                    let seed = rng::derive(rng::derive(reps as u64, batch), r as u64);
                    let z = DVector::from_vec(sampler.draw(seed).unwrap().stacked());
                    emp += &z * z.transpose();
                }
                total += (emp / reps as f64 - &truth).norm();
            }
            errors.push(total / batches as f64);
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ScenarioConfig::simulation_default(ScenarioKind::TukeyGh, 7, 10);
        let text = toml::to_string(&cfg).unwrap();
        let back: ScenarioConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    proptest! {
        #[test]
        fn tukey_strictly_increasing(a in -4.0f64..4.0, b in -4.0f64..4.0, g in -1.0f64..1.0, h in 0.0f64..2.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(tukey_gh(lo, g, h).unwrap() < tukey_gh(hi, g, h).unwrap());
        }

        #[test]
        fn mean_symmetric(x in -1.0f64..2.0, y in -1.0f64..2.0) {
            prop_assert_eq!(nonstationary_mean(&Site { x, y }), nonstationary_mean(&Site { x: y, y: x }));
        }
    }
}
