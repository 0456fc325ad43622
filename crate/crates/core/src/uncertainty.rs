//! Prediction intervals from a bootstrap ensemble.
//!
//! The training data `D` is split into `D1` and `D2`. A base network is
//! trained on half of `D1`; each ensemble member copies it, freezes the
//! lower layers and retrains the rest on a resample of `D1` drawn with
//! replacement. Member spread gives the model variance, squared residuals
//! on `D2` in excess of that spread give a local noise variance, and the
//! two are combined into per-variable t-intervals.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deepkriging::{self, DeepKrigingModel, FitConfig, Mode};
use crate::error::{Error, Result};
use crate::nn::{self, LossWeights, Network, TrainConfig};
use crate::rng;
use crate::spatial::{complement, split_indices, BivariateObservations, Site, SiteSet, SplitSpec};
use crate::special::t_quantile;

/// How the ensemble covariance is formed from member predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpreadForm {
    /// Sample covariance around the ensemble mean, divisor `B - 1`.
    #[default]
    Centered,
    /// `sum_j f_j f_j^T / (B - 1)` without centering. Kept for comparison;
    /// it does not vanish when the members agree.
    RawSecondMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Number of members `B`.
    #[serde(default = "default_members")]
    pub members: usize,
    /// Frozen leading layers `L0`; `None` freezes all but the output layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen_layers: Option<usize>,
    /// Neighbours `G` averaged for the local noise variance.
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Share of `D1` the base network is trained on.
    #[serde(default = "default_half")]
    pub base_fraction: f64,
    /// Share of the training data assigned to `D1`; the rest is `D2`.
    #[serde(default = "default_half")]
    pub fit_fraction: f64,
    #[serde(default)]
    pub spread: SpreadForm,
}

fn default_members() -> usize {
    50
}
fn default_neighbors() -> usize {
    10
}
fn default_alpha() -> f64 {
    0.05
}
fn default_half() -> f64 {
    0.5
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: default_members(),
            frozen_layers: None,
            neighbors: default_neighbors(),
            alpha: default_alpha(),
            base_fraction: 0.5,
            fit_fraction: 0.5,
            spread: SpreadForm::Centered,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(Error::Config(format!("ensemble needs at least 2 members, got {}", self.members)));
        }
        if self.neighbors == 0 {
            return Err(Error::Config("neighbors must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        for (name, f) in [("base_fraction", self.base_fraction), ("fit_fraction", self.fit_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {f}")));
            }
        }
        Ok(())
    }

    /// `L0` for a network of `depth` layers.
    pub fn frozen_for(&self, depth: usize) -> Result<usize> {
        let l0 = self.frozen_layers.unwrap_or(depth.saturating_sub(1));
        if l0 >= depth {
            return Err(Error::Config(format!(
                "frozen_layers = {l0} leaves nothing to retrain in a {depth}-layer network"
            )));
        }
        Ok(l0)
    }
}

/// A base model and `B` retrained copies of its networks.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    /// Trained on `D11`; supplies features and target scaling to members.
    pub base: DeepKrigingModel,
    /// One entry per member, laid out like `base.nets`.
    pub members: Vec<Vec<Network>>,
    pub frozen_layers: usize,
    /// Size of the set the members were resampled from.
    pub n_fit: usize,
}

fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

fn subset_covariates(c: Option<&DMatrix<f64>>, idx: &[usize]) -> Option<DMatrix<f64>> {
    c.map(|m| select_rows(m, idx))
}

/// Retrains the unfrozen layers of `nets` on `(x, ys)`.
fn retrain(nets: &mut [Network], mode: Mode, x: &DMatrix<f64>, ys: &DMatrix<f64>, l0: usize, train: &TrainConfig) -> Result<()> {
    for (u, net) in nets.iter_mut().enumerate() {
        net.freeze_prefix(l0);
        let cfg = TrainConfig {
            seed: rng::derive(train.seed, u as u64),
            ..train.clone()
        };
        let target = match mode {
            Mode::Bivariate => ys.clone(),
            Mode::Independent => ys.columns(u, 1).into_owned(),
        };
        nn::train(net, x, &target, &LossWeights::uniform(target.ncols()), &cfg)?;
    }
    Ok(())
}

/// Trains the base network on part of `d1` and `B` members on resamples of
/// all of `d1`. Members train in parallel; a diverging member is retried
/// once on a fresh resample.
pub fn fit_ensemble(
    d1: &BivariateObservations,
    covariates: Option<&DMatrix<f64>>,
    fit: &FitConfig,
    ens: &EnsembleConfig,
    seed: u64,
) -> Result<EnsembleModel> {
    ens.validate()?;
    fit.validate()?;
    let l0 = ens.frozen_for(fit.architecture.depth())?;
    let n = d1.len();
    if n < 2 {
        return Err(Error::Argument("need at least 2 sites to build an ensemble".into()));
    }

    let base_idx = split_indices(n, &SplitSpec::new(rng::derive(seed, 0), vec![ens.base_fraction]))?.remove(0);
    let d11 = d1.subset(&base_idx)?;
    let base_cfg = FitConfig {
        train: TrainConfig {
            seed: rng::derive(seed, 1),
            ..fit.train.clone()
        },
        ..fit.clone()
    };
    let (base, _) = deepkriging::fit(&d11, subset_covariates(covariates, &base_idx).as_ref(), &base_cfg)?;

    let x = base.features(&d1.sites, covariates)?.data;
    let ys = base.targets.apply(&deepkriging::targets_of(d1));

    let members = (0..ens.members)
        .into_par_iter()
        .map(|j| {
            let mut last = None;
            for attempt in 0..2u64 {
                let stream = rng::derive(seed, 100 + 2 * j as u64 + attempt);
                let mut g = rng::from_seed(stream);
                let idx: Vec<usize> = (0..n).map(|_| g.random_range(0..n)).collect();
                let mut nets = base.nets.clone();
                let train = TrainConfig {
                    seed: rng::derive(stream, 1),
                    ..fit.train.clone()
                };
                match retrain(&mut nets, base.mode, &select_rows(&x, &idx), &select_rows(&ys, &idx), l0, &train) {
                    Ok(()) => return Ok(nets),
                    Err(e @ Error::Diverged { .. }) => {
                        log::warn!("ensemble member {j} diverged (attempt {}): {e}", attempt + 1);
                        last = Some(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(last.expect("loop ran"))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(EnsembleModel {
        base,
        members,
        frozen_layers: l0,
        n_fit: n,
    })
}

impl EnsembleModel {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Trainable parameters of one member network (the largest, in
    /// independent mode).
    pub fn trainable_params(&self) -> usize {
        self.members
            .first()
            .map(|nets| nets.iter().map(Network::trainable_params).max().unwrap_or(0))
            .unwrap_or(0)
    }

    /// `|D1| - p`, clamped to at least 1.
    pub fn degrees_of_freedom(&self) -> usize {
        let p = self.trainable_params();
        if p >= self.n_fit {
            log::warn!(
                "{} trainable parameters exceed the {} fitting sites; using df = 1",
                p,
                self.n_fit
            );
            1
        } else {
            self.n_fit - p
        }
    }

    /// Per-member predictions on the original scale, each `n x 2`.
    pub fn member_predictions(&self, sites: &SiteSet, covariates: Option<&DMatrix<f64>>) -> Result<Vec<DMatrix<f64>>> {
        let x = self.base.features(sites, covariates)?.data;
        self.members
            .par_iter()
            .map(|nets| Ok(self.base.targets.invert(&self.base.raw_outputs_with(nets, &x)?)))
            .collect()
    }

    pub fn mean_cov(&self, sites: &SiteSet, covariates: Option<&DMatrix<f64>>, form: SpreadForm) -> Result<EnsembleStats> {
        ensemble_mean_cov(&self.member_predictions(sites, covariates)?, form)
    }
}

/// Ensemble mean and 2x2 spread per site.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: Vec<[f64; 2]>,
    pub cov: Vec<[[f64; 2]; 2]>,
}

/// Mean and covariance over members of per-site prediction pairs.
/// `preds[j]` is member `j`'s `n x 2` output.
pub fn ensemble_mean_cov(preds: &[DMatrix<f64>], form: SpreadForm) -> Result<EnsembleStats> {
    let b = preds.len();
    if b < 2 {
        return Err(Error::Argument(format!("need at least 2 members, got {b}")));
    }
    let n = preds[0].nrows();
    if preds.iter().any(|p| p.shape() != (n, 2)) {
        return Err(Error::Argument("member predictions must all be n x 2".into()));
    }
    let denom = (b - 1) as f64;
    let mut mean = Vec::with_capacity(n);
    let mut cov = Vec::with_capacity(n);
    for i in 0..n {
        let mut m = [0.0; 2];
        for p in preds {
            m[0] += p[(i, 0)];
            m[1] += p[(i, 1)];
        }
        m[0] /= b as f64;
        m[1] /= b as f64;
        let c = match form {
            SpreadForm::Centered => m,
            SpreadForm::RawSecondMoment => [0.0, 0.0],
        };
        let mut s = [[0.0; 2]; 2];
        for p in preds {
            let d = [p[(i, 0)] - c[0], p[(i, 1)] - c[1]];
            s[0][0] += d[0] * d[0];
            s[0][1] += d[0] * d[1];
            s[1][1] += d[1] * d[1];
        }
        s[0][0] /= denom;
        s[0][1] /= denom;
        s[1][1] /= denom;
        s[1][0] = s[0][1];
        mean.push(m);
        cov.push(s);
    }
    Ok(EnsembleStats { mean, cov })
}

/// `max{(z - yhat)^2 - var, 0}`.
pub fn excess_square(z: f64, yhat: f64, var: f64) -> f64 {
    ((z - yhat).powi(2) - var).max(0.0)
}

/// Squared residuals in excess of the ensemble variance at held-out sites.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    pub sites: SiteSet,
    pub r2: Vec<[f64; 2]>,
}

impl ResidualField {
    pub fn from_stats(obs: &BivariateObservations, stats: &EnsembleStats) -> Result<Self> {
        if stats.mean.len() != obs.len() {
            return Err(Error::Argument("statistics and observations differ in length".into()));
        }
        let r2 = (0..obs.len())
            .map(|k| {
                [
                    excess_square(obs.z1[k], stats.mean[k][0], stats.cov[k][0][0]),
                    excess_square(obs.z2[k], stats.mean[k][1], stats.cov[k][1][1]),
                ]
            })
            .collect();
        Ok(ResidualField {
            sites: obs.sites.clone().with_index(),
            r2,
        })
    }

    /// Mean of `r2` over the `g` nearest sites to `s0`.
    pub fn local_variance(&self, s0: &Site, g: usize) -> Result<[f64; 2]> {
        let nn = self.sites.knn(s0, g)?;
        let mut v = [0.0; 2];
        for (k, _) in &nn {
            v[0] += self.r2[*k][0];
            v[1] += self.r2[*k][1];
        }
        Ok([v[0] / g as f64, v[1] / g as f64])
    }
}

pub fn residual_field(
    ens: &EnsembleModel,
    d2: &BivariateObservations,
    covariates: Option<&DMatrix<f64>>,
    form: SpreadForm,
) -> Result<ResidualField> {
    ResidualField::from_stats(d2, &ens.mean_cov(&d2.sites, covariates, form)?)
}

/// `mean -/+ t_{1 - alpha/2, df} sqrt(var_model + var_noise)`.
pub fn t_bounds(mean: f64, var_model: f64, var_noise: f64, alpha: f64, df: usize) -> Result<(f64, f64)> {
    if df == 0 {
        return Err(Error::Config("degrees of freedom must be >= 1".into()));
    }
    let t = t_quantile(1.0 - alpha / 2.0, df as f64)?;
    let half = t * (var_model.max(0.0) + var_noise.max(0.0)).sqrt();
    Ok((mean - half, mean + half))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRow {
    pub site: Site,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    /// Local noise variance per variable.
    pub noise: [f64; 2],
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalReport {
    pub rows: Vec<IntervalRow>,
    pub df: usize,
    pub alpha: f64,
}

impl IntervalReport {
    /// Writes `x,y,mean1,lo1,hi1,mean2,lo2,hi2,sigma_eps1,sigma_eps2`,
    /// where `sigma_eps*` are the local noise variances.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "y", "mean1", "lo1", "hi1", "mean2", "lo2", "hi2", "sigma_eps1", "sigma_eps2"])?;
        for r in &self.rows {
            let vals = [
                r.site.x, r.site.y, r.mean[0], r.lo[0], r.hi[0], r.mean[1], r.lo[1], r.hi[1], r.noise[0], r.noise[1],
            ];
            w.write_record(vals.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn lower(&self, u: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.lo[u]).collect()
    }

    pub fn upper(&self, u: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.hi[u]).collect()
    }

    pub fn means(&self, u: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean[u]).collect()
    }
}

/// Intervals at `sites` from precomputed ensemble statistics.
pub fn intervals_from_stats(
    sites: &SiteSet,
    stats: &EnsembleStats,
    resid: &ResidualField,
    g: usize,
    alpha: f64,
    df: usize,
) -> Result<IntervalReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if g == 0 || g > resid.sites.len() {
        return Err(Error::Argument(format!(
            "neighbour count {g} must be in 1..={}",
            resid.sites.len()
        )));
    }
    if df == 0 {
        return Err(Error::Config("degrees of freedom must be >= 1".into()));
    }
    let t = t_quantile(1.0 - alpha / 2.0, df as f64)?;
    let rows = sites
        .sites()
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let noise = resid.local_variance(s, g)?;
            let mean = stats.mean[i];
            let cov = stats.cov[i];
            let mut lo = [0.0; 2];
            let mut hi = [0.0; 2];
            for u in 0..2 {
                let half = t * (cov[u][u].max(0.0) + noise[u]).sqrt();
                lo[u] = mean[u] - half;
                hi[u] = mean[u] + half;
            }
            Ok(IntervalRow {
                site: *s,
                mean,
                cov,
                noise,
                lo,
                hi,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IntervalReport { rows, df, alpha })
}

/// Intervals at `sites` for a fitted ensemble and residual field.
pub fn interval(
    ens: &EnsembleModel,
    resid: &ResidualField,
    sites: &SiteSet,
    covariates: Option<&DMatrix<f64>>,
    g: usize,
    alpha: f64,
    df: usize,
    form: SpreadForm,
) -> Result<IntervalReport> {
    let stats = ens.mean_cov(sites, covariates, form)?;
    intervals_from_stats(sites, &stats, resid, g, alpha, df)
}

/// Everything the interval workflow produces.
#[derive(Debug, Clone)]
pub struct IntervalRun {
    pub ensemble: EnsembleModel,
    pub residuals: ResidualField,
    pub report: IntervalReport,
}

/// Splits `train` into `D1`/`D2`, fits the ensemble on `D1`, estimates
/// the residual field on `D2` and returns intervals at `targets`.
pub fn prediction_intervals(
    train: &BivariateObservations,
    train_covariates: Option<&DMatrix<f64>>,
    targets: &SiteSet,
    target_covariates: Option<&DMatrix<f64>>,
    fit: &FitConfig,
    ens: &EnsembleConfig,
    seed: u64,
) -> Result<IntervalRun> {
    ens.validate()?;
    let n = train.len();
    let d1_idx = split_indices(n, &SplitSpec::new(rng::derive(seed, 7), vec![ens.fit_fraction]))?.remove(0);
    let d2_idx = complement(n, &d1_idx);
    if d2_idx.len() < ens.neighbors {
        return Err(Error::Config(format!(
            "D2 has {} sites, fewer than the {} neighbours requested",
            d2_idx.len(),
            ens.neighbors
        )));
    }
    let d1 = train.subset(&d1_idx)?;
    let d2 = train.subset(&d2_idx)?;
    let ensemble = fit_ensemble(&d1, subset_covariates(train_covariates, &d1_idx).as_ref(), fit, ens, seed)?;
    let residuals = residual_field(&ensemble, &d2, subset_covariates(train_covariates, &d2_idx).as_ref(), ens.spread)?;
    let df = ensemble.degrees_of_freedom();
    let report = interval(&ensemble, &residuals, targets, target_covariates, ens.neighbors, ens.alpha, df, ens.spread)?;
    Ok(IntervalRun {
        ensemble,
        residuals,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisConfig, Bounds, Embedder};
    use crate::deepkriging::Architecture;
    use crate::nn::EarlyStop;
    use proptest::prelude::*;

    fn mat(rows: &[[f64; 2]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), 2, |i, u| rows[i][u])
    }

    #[test]
    fn hand_computed_spread() {
        let preds = vec![mat(&[[1.0, 2.0]]), mat(&[[2.0, 3.0]]), mat(&[[3.0, 4.0]])];
        let s = ensemble_mean_cov(&preds, SpreadForm::Centered).unwrap();
        assert_eq!(s.mean[0], [2.0, 3.0]);
        assert_eq!(s.cov[0], [[1.0, 1.0], [1.0, 1.0]]);
        // uncentered: (1+4+9)/2, (2+6+12)/2, (4+9+16)/2
        let r = ensemble_mean_cov(&preds, SpreadForm::RawSecondMoment).unwrap();
        assert_eq!(r.cov[0], [[7.0, 10.0], [10.0, 14.5]]);
    }

    #[test]
    fn identical_members_have_zero_spread() {
        let p = mat(&[[0.3, -1.2], [4.0, 5.0]]);
        let s = ensemble_mean_cov(&[p.clone(), p.clone(), p.clone()], SpreadForm::Centered).unwrap();
        assert_eq!(s.mean, vec![[0.3, -1.2], [4.0, 5.0]]);
        assert!(s.cov.iter().all(|c| c.iter().flatten().all(|v| *v == 0.0)));
        assert!(ensemble_mean_cov(&[p], SpreadForm::Centered).is_err());
    }

    #[test]
    fn excess_square_formula() {
        assert_eq!(excess_square(1.0, 1.0, 0.0), 0.0);
        assert_eq!(excess_square(3.0, 1.0, 1.0), 3.0);
        assert_eq!(excess_square(1.5, 1.0, 1.0), 0.0);
    }

    fn line_field(r2: Vec<[f64; 2]>) -> ResidualField {
        let coords: Vec<_> = (0..r2.len()).map(|i| (i as f64, 0.0)).collect();
        ResidualField {
            sites: SiteSet::from_coords(&coords).unwrap(),
            r2,
        }
    }

    #[test]
    fn local_variance_averages_nearest() {
        let f = line_field(vec![[1.0, 10.0], [3.0, 30.0], [5.0, 50.0], [100.0, 0.0]]);
        let s0 = Site::new(0.9, 0.0).unwrap();
        assert_eq!(f.local_variance(&s0, 2).unwrap(), [2.0, 20.0]);
        // every site: global mean
        let all = f.local_variance(&s0, 4).unwrap();
        assert_eq!(all, [109.0 / 4.0, 90.0 / 4.0]);
        assert!(f.local_variance(&s0, 5).is_err());
    }

    #[test]
    fn t_interval_half_width() {
        // t_{0.975, 30} = 2.0423 from standard tables
        let (lo, hi) = t_bounds(0.0, 0.64, 0.36, 0.05, 30).unwrap();
        assert!((hi - 2.0423).abs() < 1e-4 && (lo + 2.0423).abs() < 1e-4);
        assert_eq!(t_bounds(1.5, 0.0, 0.0, 0.05, 10).unwrap(), (1.5, 1.5));
        assert!(t_bounds(0.0, 1.0, 0.0, 0.05, 0).is_err());
    }

    #[test]
    fn degenerate_interval() {
        let sites = SiteSet::from_coords(&[(0.0, 0.0), (1.0, 0.0)]).unwrap();
        let stats = EnsembleStats {
            mean: vec![[1.0, 2.0], [3.0, 4.0]],
            cov: vec![[[0.0; 2]; 2]; 2],
        };
        let f = line_field(vec![[0.0, 0.0]; 3]);
        let rep = intervals_from_stats(&sites, &stats, &f, 2, 0.05, 5).unwrap();
        for r in &rep.rows {
            assert_eq!(r.lo, r.mean);
            assert_eq!(r.hi, r.mean);
        }
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,mean1,lo1,hi1,mean2,lo2,hi2,sigma_eps1,sigma_eps2\n0,0,1,1,1,2,2,2,0,0\n"));
    }

    proptest! {
        #[test]
        fn spread_is_psd_and_order_free(vals in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..12), rot in 0usize..11) {
            let preds: Vec<_> = vals.iter().map(|&(a, b)| mat(&[[a, b]])).collect();
            let s = ensemble_mean_cov(&preds, SpreadForm::Centered).unwrap();
            let c = s.cov[0];
            let tr = c[0][0] + c[1][1];
            let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
            let disc = ((c[0][0] - c[1][1]).powi(2) + 4.0 * c[0][1] * c[0][1]).sqrt();
            prop_assert!((tr - disc) / 2.0 >= -1e-10);
            prop_assert!(det >= -1e-9 * (1.0 + tr * tr));
            let mut rotated = preds.clone();
            rotated.rotate_left(rot % preds.len());
            let r = ensemble_mean_cov(&rotated, SpreadForm::Centered).unwrap();
            for u in 0..2 {
                prop_assert!((r.mean[0][u] - s.mean[0][u]).abs() < 1e-12);
                for v in 0..2 {
                    prop_assert!((r.cov[0][u][v] - s.cov[0][u][v]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn intervals_shrink_with_alpha_and_grow_with_variance(
            mean in -3.0f64..3.0, vm in 0.0f64..2.0, vn in 0.01f64..2.0,
            a1 in 0.01f64..0.5, a2 in 0.01f64..0.5, extra in 0.01f64..1.0, df in 1usize..200,
        ) {
            let (lo_a, hi_a) = t_bounds(mean, vm, vn, a1.min(a2), df).unwrap();
            let (lo_b, hi_b) = t_bounds(mean, vm, vn, a1.max(a2), df).unwrap();
            prop_assert!(hi_b - lo_b <= hi_a - lo_a + 1e-12);
            let (lo_c, hi_c) = t_bounds(mean, vm + extra, vn, a1, df).unwrap();
            let (lo_d, hi_d) = t_bounds(mean, vm, vn, a1, df).unwrap();
            prop_assert!(hi_c - lo_c > hi_d - lo_d);
            prop_assert!(lo_d <= mean && mean <= hi_d);
        }
    }

    fn small_basis() -> BasisConfig {
        BasisConfig::grid(&[4, 9], Bounds::new(0.0, 1.0, 0.0, 1.0).unwrap())
    }

    /// Targets that are an exact combination of the basis columns.
    fn noiseless(shift: [f64; 2]) -> BivariateObservations {
        let sites = SiteSet::grid(10, 8, (0.0, 1.0), (0.0, 1.0)).unwrap();
        let phi = Embedder::new(&small_basis()).unwrap().embed(&sites, None).unwrap().data;
        let z1 = (0..sites.len()).map(|i| shift[0] + 0.8 * phi[(i, 0)] - 0.5 * phi[(i, 6)] + 0.3 * phi[(i, 10)]).collect();
        let z2 = (0..sites.len()).map(|i| shift[1] - 0.4 * phi[(i, 2)] + 0.6 * phi[(i, 8)]).collect();
        BivariateObservations::new(sites, z1, z2).unwrap()
    }

    fn small_fit() -> FitConfig {
        FitConfig {
            basis: small_basis(),
            architecture: Architecture {
                hidden: vec![16],
                regularizer: None,
                regularized_layers: 0,
            },
            train: TrainConfig {
                learning_rate: 0.01,
                batch_size: 16,
                epochs: 400,
                early_stop: Some(EarlyStop {
                    patience: 40,
                    ..EarlyStop::default()
                }),
                seed: 3,
                ..TrainConfig::default()
            },
            mode: Mode::Bivariate,
            intercept: true,
        }
    }

    fn small_ens(b: usize) -> EnsembleConfig {
        EnsembleConfig {
            members: b,
            neighbors: 5,
            ..EnsembleConfig::default()
        }
    }

    #[test]
    fn members_share_frozen_layers_and_rerun_identically() {
        let d1 = noiseless([0.0, 0.0]);
        let a = fit_ensemble(&d1, None, &small_fit(), &small_ens(2), 11).unwrap();
        assert_eq!(a.frozen_layers, 1);
        assert_eq!(a.size(), 2);
        for m in &a.members {
            assert_eq!(m[0].layers[0].weights, a.base.nets[0].layers[0].weights);
            assert_eq!(m[0].layers[0].bias, a.base.nets[0].layers[0].bias);
        }
        assert_ne!(a.members[0][0].layers[1].weights, a.members[1][0].layers[1].weights);
        assert_eq!(a.trainable_params(), 2 * 17);
        assert_eq!(a.degrees_of_freedom(), 80 - 34);
        let b = fit_ensemble(&d1, None, &small_fit(), &small_ens(2), 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_members_collapse() {
        let d1 = noiseless([0.0, 0.0]);
        let mut fit = small_fit();
        fit.architecture.hidden.clear();
        fit.train.epochs = 3000;
        fit.train.batch_size = 80;
        fit.train.learning_rate = 0.02;
        fit.train.early_stop = None;
        let ens = EnsembleConfig {
            frozen_layers: Some(0),
            ..small_ens(4)
        };
        let model = fit_ensemble(&d1, None, &fit, &ens, 5).unwrap();
        let probe = SiteSet::grid(7, 7, (0.05, 0.95), (0.05, 0.95)).unwrap();
        let s = model.mean_cov(&probe, None, SpreadForm::Centered).unwrap();
        let preds = model.member_predictions(&probe, None).unwrap();
        for p in &preds {
            for i in 0..probe.len() {
                for u in 0..2 {
                    assert!((p[(i, u)] - s.mean[i][u]).abs() < 1e-2);
                }
            }
        }
        assert!(s.cov.iter().all(|c| c[0][0] < 1e-4 && c[1][1] < 1e-4));
    }

    #[test]
    fn bounds_follow_a_target_shift() {
        let fit = small_fit();
        let ens = small_ens(3);
        let probe = SiteSet::grid(4, 4, (0.1, 0.9), (0.1, 0.9)).unwrap();
        let a = prediction_intervals(&noiseless([0.0, 0.0]), None, &probe, None, &fit, &ens, 9).unwrap();
        let b = prediction_intervals(&noiseless([2.5, 0.0]), None, &probe, None, &fit, &ens, 9).unwrap();
        assert_eq!(a.report.df, b.report.df);
        for (ra, rb) in a.report.rows.iter().zip(&b.report.rows) {
            assert!((rb.lo[0] - ra.lo[0] - 2.5).abs() < 1e-9);
            assert!((rb.hi[0] - ra.hi[0] - 2.5).abs() < 1e-9);
            assert!((rb.lo[1] - ra.lo[1]).abs() < 1e-9);
            assert!(ra.lo[0] <= ra.mean[0] && ra.mean[0] <= ra.hi[0]);
        }
    }

    #[test]
    fn config_checks() {
        assert!(small_ens(1).validate().is_err());
        let e = EnsembleConfig {
            frozen_layers: Some(2),
            ..small_ens(3)
        };
        assert!(e.frozen_for(2).is_err());
        assert_eq!(EnsembleConfig::default().frozen_for(6).unwrap(), 5);
        let parsed: EnsembleConfig = toml::from_str("members = 20\nspread = \"raw_second_moment\"").unwrap();
        assert_eq!(parsed.members, 20);
        assert_eq!(parsed.spread, SpreadForm::RawSecondMoment);
        assert!(toml::from_str::<EnsembleConfig>("membres = 2").is_err());
    }
}
