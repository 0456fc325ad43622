//! Cokriging: GLS trend estimation, best linear unbiased prediction of both
//! variables with universal-kriging variances, and maximum-likelihood
//! fitting of the covariance parameters.
//!
//! All vectors and matrices use the stacked layout: every variable-1 row,
//! then every variable-2 row.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::Bounds;
use crate::covariance::{CovarianceFamily, CovarianceModel, CrossKernel, LatentCorrelation, LmcParams, MaternParams};
use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};
use crate::optim::{nelder_mead, SimplexConfig};
use crate::rng;
use crate::spatial::{BivariateObservations, Site, SiteSet};
use crate::special::normal_quantile;

/// Block-diagonal trend design: each variable gets an intercept plus the
/// covariate columns, `2N x 2(1 + q)`.
pub fn design_matrix(n: usize, covariates: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
    let q = match covariates {
        Some(c) if c.nrows() != n => {
            return Err(Error::Argument(format!("{} covariate rows for {} sites", c.nrows(), n)));
        }
        Some(c) => c.ncols(),
        None => 0,
    };
    let p = 1 + q;
    let mut x = DMatrix::zeros(2 * n, 2 * p);
    for u in 0..2 {
        for i in 0..n {
            x[(u * n + i, u * p)] = 1.0;
            if let Some(c) = covariates {
                for j in 0..q {
                    x[(u * n + i, u * p + 1 + j)] = c[(i, j)];
                }
            }
        }
    }
    Ok(x)
}

/// Factors the Gram matrix `M` of a whitened design, naming the first
/// column that is (numerically) a combination of earlier ones.
fn gram_factor(m: &DMatrix<f64>) -> Result<Cholesky> {
    let p = m.nrows();
    let mut l = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 1e-10 * m[(j, j)].abs()) || m[(j, j)] <= 0.0 {
            return Err(Error::Singular { column: j });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..p {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(Cholesky::from_lower(l))
}

/// GLS quantities for one covariance factor.
#[derive(Debug, Clone)]
pub struct Gls {
    pub beta: DVector<f64>,
    /// `(X^T C^-1 X)^-1`.
    pub v: DMatrix<f64>,
    /// `L^-1 X`.
    pub x_white: DMatrix<f64>,
    /// `L^-1 (Z - X beta)`.
    pub resid_white: DVector<f64>,
}

impl Gls {
    /// `C^-1 (Z - X beta)` given the factor used to fit.
    pub fn weights(&self, chol: &Cholesky) -> DVector<f64> {
        let mut w = self.resid_white.clone();
        chol.l().tr_solve_lower_triangular_mut(&mut w);
        w
    }
}

/// Generalized least squares through a Cholesky factor of `C`.
pub fn gls(chol: &Cholesky, x: &DMatrix<f64>, z: &DVector<f64>) -> Result<Gls> {
    if x.nrows() != chol.dim() || z.len() != chol.dim() {
        return Err(Error::Argument(format!(
            "design has {} rows and response {}, covariance is {}",
            x.nrows(),
            z.len(),
            chol.dim()
        )));
    }
    let x_white = chol.solve_lower(x);
    let mut z_white = z.clone();
    chol.l().solve_lower_triangular_mut(&mut z_white);
    let gram = gram_factor(&(x_white.transpose() * &x_white))?;
    let beta = gram.solve_vec(&(x_white.transpose() * &z_white));
    let v = gram.solve(&DMatrix::identity(x.ncols(), x.ncols()));
    let resid_white = z_white - &x_white * &beta;
    Ok(Gls {
        beta,
        v,
        x_white,
        resid_white,
    })
}

/// `beta = (X^T C^-1 X)^-1 X^T C^-1 Z`, solved through factorizations.
pub fn gls_beta(c: &DMatrix<f64>, x: &DMatrix<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(gls(&linalg::cholesky_jittered(c)?, x, z)?.beta)
}

/// A covariance model conditioned on training data.
#[derive(Debug, Clone)]
pub struct CokrigingModel {
    pub cov: CovarianceModel,
    kernel: CrossKernel,
    sites: SiteSet,
    chol: Cholesky,
    gls: Gls,
    weights: DVector<f64>,
    n_covariates: usize,
}

/// Predictive means and 2x2 covariances per site.
#[derive(Debug, Clone, PartialEq)]
pub struct CokrigingPrediction {
    pub mean: Vec<[f64; 2]>,
    pub cov: Vec<[[f64; 2]; 2]>,
}

impl CokrigingPrediction {
    /// Gaussian `mean -/+ z_{1 - alpha/2} sd` bounds for variable `u`.
    pub fn bounds(&self, u: usize, alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Argument(format!("alpha must be in (0, 1), got {alpha}")));
        }
        let z = normal_quantile(1.0 - alpha / 2.0)?;
        Ok(self
            .mean
            .iter()
            .zip(&self.cov)
            .map(|(m, c)| {
                let h = z * c[u][u].max(0.0).sqrt();
                (m[u] - h, m[u] + h)
            })
            .unzip())
    }

    pub fn means(&self, u: usize) -> Vec<f64> {
        self.mean.iter().map(|m| m[u]).collect()
    }
}

/// Target sites handled per block of the prediction.
const PREDICT_CHUNK: usize = 256;

impl CokrigingModel {
    pub fn fit(cov: &CovarianceModel, obs: &BivariateObservations, covariates: Option<&DMatrix<f64>>) -> Result<Self> {
        let kernel = cov.kernel()?;
        let chol = linalg::cholesky_jittered(&kernel.assemble(obs.sites.sites(), cov.nugget))?;
        let x = design_matrix(obs.len(), covariates)?;
        let gls = gls(&chol, &x, &DVector::from_vec(obs.stacked()))?;
        let weights = gls.weights(&chol);
        Ok(CokrigingModel {
            cov: cov.clone(),
            kernel,
            sites: obs.sites.clone(),
            chol,
            gls,
            weights,
            n_covariates: covariates.map_or(0, |c| c.ncols()),
        })
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.gls.beta
    }

    /// Predicts a new observation of both variables at each site. The
    /// variance includes the nugget, so at a training site it is zero only
    /// when the nugget is.
    pub fn predict(&self, sites: &SiteSet, covariates: Option<&DMatrix<f64>>) -> Result<CokrigingPrediction> {
        let m_all = sites.len();
        match covariates {
            Some(c) if c.nrows() != m_all || c.ncols() != self.n_covariates => {
                return Err(Error::Schema(format!(
                    "covariates are {}x{}, expected {}x{}",
                    c.nrows(),
                    c.ncols(),
                    m_all,
                    self.n_covariates
                )))
            }
            None if self.n_covariates > 0 => {
                return Err(Error::Schema(format!("model needs {} covariate columns", self.n_covariates)))
            }
            _ => {}
        }
        let k0 = self.kernel.at(0.0);
        let c00 = [[k0[0] + self.cov.nugget[0], k0[1]], [k0[1], k0[2] + self.cov.nugget[1]]];
        let p = 1 + self.n_covariates;
        let train = self.sites.sites();

        let chunks: Vec<(usize, usize)> = (0..m_all).step_by(PREDICT_CHUNK).map(|s| (s, (s + PREDICT_CHUNK).min(m_all))).collect();
        let parts = chunks
            .par_iter()
            .map(|&(start, end)| {
                let targets = &sites.sites()[start..end];
                let m = targets.len();
                let c0 = self.kernel.cross(train, targets);
                let w = self.chol.solve_lower(&c0);
                let cov_part = c0.transpose() * &self.weights;
                let sub_cov = covariates.map(|c| c.rows(start, m).into_owned());
                let x0 = design_matrix(m, sub_cov.as_ref())?;
                let trend = &x0 * &self.gls.beta;
                // U = X0^T - X^T C^-1 C0, one p-pair of columns per site
                let u_all = x0.transpose() - self.gls.x_white.transpose() * &w;
                let mut mean = Vec::with_capacity(m);
                let mut cov = Vec::with_capacity(m);
                for j in 0..m {
                    let cols = [j, m + j];
                    let mut s = [[0.0; 2]; 2];
                    for a in 0..2 {
                        for b in 0..2 {
                            let wa = w.column(cols[a]);
                            let wb = w.column(cols[b]);
                            let ua = u_all.column(cols[a]);
                            let ub = u_all.column(cols[b]);
                            let corr = (ua.transpose() * &self.gls.v * ub)[(0, 0)];
                            s[a][b] = c00[a][b] - wa.dot(&wb) + corr;
                        }
                    }
                    mean.push([trend[j] + cov_part[j], trend[m + j] + cov_part[m + j]]);
                    cov.push(s);
                }
                debug_assert_eq!(u_all.nrows(), 2 * p);
                Ok((mean, cov))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = CokrigingPrediction {
            mean: Vec::with_capacity(m_all),
            cov: Vec::with_capacity(m_all),
        };
        for (m, c) in parts {
            out.mean.extend(m);
            out.cov.extend(c);
        }
        Ok(out)
    }
}

/// Profile negative log-likelihood over the trend coefficients:
/// `1/2 log det C + 1/2 r^T C^-1 r + N log 2 pi` with `r = Z - X beta_hat`.
///
/// A covariance that cannot be factored gives `+inf` so a search can back
/// away from it; invalid parameters are an error.
pub fn neg_log_likelihood(cov: &CovarianceModel, obs: &BivariateObservations, x: &DMatrix<f64>) -> Result<f64> {
    let kernel = cov.kernel()?;
    let chol = match linalg::cholesky_jittered(&kernel.assemble(obs.sites.sites(), cov.nugget)) {
        Ok(c) => c,
        Err(Error::NotPositiveDefinite { .. }) => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let g = gls(&chol, x, &DVector::from_vec(obs.stacked()))?;
    let n = obs.len() as f64;
    Ok(0.5 * chol.log_det() + 0.5 * g.resid_white.norm_squared() + n * (2.0 * std::f64::consts::PI).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MleConfig {
    #[serde(default)]
    pub simplex: SimplexConfig,
    /// Fit on a random subset of this many sites.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
    /// Estimate the nugget variances too.
    #[serde(default = "yes")]
    pub fit_nugget: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            simplex: SimplexConfig::default(),
            subsample: None,
            fit_nugget: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MleFit {
    pub model: CovarianceModel,
    pub nll: f64,
    pub initial_nll: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Smallest nugget represented on the log scale.
const NUGGET_FLOOR: f64 = 1e-8;

/// Unconstrained coordinates: logs of positive parameters, `atanh` of the
/// correlation, raw LMC weights.
fn pack(model: &CovarianceModel, fit_nugget: bool) -> Vec<f64> {
    let mut t = match &model.family {
        CovarianceFamily::Matern(p) => vec![
            p.sigma2_1.ln(),
            p.sigma2_2.ln(),
            p.rho.atanh(),
            p.nu_1.ln(),
            p.nu_2.ln(),
            p.alpha_1.ln(),
            p.alpha_2.ln(),
        ],
        CovarianceFamily::Lmc(p) => {
            let mut t: Vec<f64> = p.a.iter().flatten().copied().collect();
            for l in &p.latent {
                t.push(l.nu.ln());
                t.push(l.alpha.ln());
            }
            t
        }
    };
    if fit_nugget {
        t.extend(model.nugget.iter().map(|v| v.max(NUGGET_FLOOR).ln()));
    }
    t
}

fn unpack(template: &CovarianceModel, t: &[f64], fit_nugget: bool) -> CovarianceModel {
    let mut m = template.clone();
    let used = match &mut m.family {
        CovarianceFamily::Matern(p) => {
            p.sigma2_1 = t[0].exp();
            p.sigma2_2 = t[1].exp();
            p.rho = t[2].tanh();
            p.nu_1 = t[3].exp();
            p.nu_2 = t[4].exp();
            p.alpha_1 = t[5].exp();
            p.alpha_2 = t[6].exp();
            7
        }
        CovarianceFamily::Lmc(p) => {
            let r = p.latent.len();
            for (i, row) in p.a.iter_mut().enumerate() {
                row.copy_from_slice(&t[i * r..(i + 1) * r]);
            }
            for (k, l) in p.latent.iter_mut().enumerate() {
                l.nu = t[2 * r + 2 * k].exp();
                l.alpha = t[2 * r + 2 * k + 1].exp();
            }
            4 * r
        }
    };
    if fit_nugget {
        for u in 0..2 {
            let v = t[used + u].exp();
            m.nugget[u] = if v <= NUGGET_FLOOR { 0.0 } else { v };
        }
    }
    m
}

/// Smoothness above this is treated as infeasible; the correlation is
/// numerically indistinguishable from the Gaussian limit there.
const MAX_SMOOTHNESS: f64 = 20.0;

/// Search-space filter: bounded smoothness, and for the Matérn family a
/// cross-correlation inside the spectral validity bound (otherwise the
/// matrix may factor on one site set and fail on a denser one).
fn admissible(m: &CovarianceModel) -> bool {
    match &m.family {
        CovarianceFamily::Matern(p) => {
            p.nu_1 <= MAX_SMOOTHNESS && p.nu_2 <= MAX_SMOOTHNESS && p.rho.abs() <= p.max_abs_rho()
        }
        CovarianceFamily::Lmc(p) => p.latent.iter().all(|l| l.nu <= MAX_SMOOTHNESS),
    }
}

/// Maximizes the profile likelihood by a simplex search from `init`.
pub fn fit_mle(
    init: &CovarianceModel,
    obs: &BivariateObservations,
    covariates: Option<&DMatrix<f64>>,
    cfg: &MleConfig,
) -> Result<MleFit> {
    init.validate()?;
    let (data, cov_sub) = match cfg.subsample {
        Some(k) if k < obs.len() => {
            if k < 2 {
                return Err(Error::Config("subsample must keep at least 2 sites".into()));
            }
            let mut g = rng::from_seed(cfg.seed);
            let mut idx = sample(&mut g, obs.len(), k).into_vec();
            idx.sort_unstable();
            let c = covariates.map(|c| DMatrix::from_fn(k, c.ncols(), |i, j| c[(idx[i], j)]));
            (obs.subset(&idx)?, c)
        }
        _ => (obs.clone(), covariates.cloned()),
    };
    let x = design_matrix(data.len(), cov_sub.as_ref())?;
    // reject a rank-deficient design before searching
    gram_factor(&(x.transpose() * &x))?;

    let objective = |t: &[f64]| -> f64 {
        let m = unpack(init, t, cfg.fit_nugget);
        if !admissible(&m) {
            return f64::INFINITY;
        }
        neg_log_likelihood(&m, &data, &x).unwrap_or(f64::INFINITY)
    };
    let t0 = pack(init, cfg.fit_nugget);
    let initial_nll = objective(&t0);
    let res = nelder_mead(objective, &t0, &cfg.simplex);
    if !res.f.is_finite() {
        return Err(Error::Fit(format!("no valid covariance found in {} evaluations", res.evals)));
    }
    Ok(MleFit {
        model: unpack(init, &res.x, cfg.fit_nugget),
        nll: res.f,
        initial_nll,
        evals: res.evals,
        converged: res.converged,
    })
}

fn sample_moments(obs: &BivariateObservations) -> ([f64; 2], f64) {
    let n = obs.len() as f64;
    let m1 = obs.z1.iter().sum::<f64>() / n;
    let m2 = obs.z2.iter().sum::<f64>() / n;
    let mut s = [0.0; 3];
    for (a, b) in obs.z1.iter().zip(&obs.z2) {
        s[0] += (a - m1).powi(2);
        s[1] += (a - m1) * (b - m2);
        s[2] += (b - m2).powi(2);
    }
    let v = [(s[0] / n).max(1e-12), (s[2] / n).max(1e-12)];
    (v, s[1] / n)
}

fn diameter(obs: &BivariateObservations) -> f64 {
    let b = Bounds::enclosing(&obs.sites);
    (b.x_max - b.x_min).hypot(b.y_max - b.y_min).max(1e-12)
}

/// Data-driven starting point for the flexible Matérn model.
pub fn initial_matern(obs: &BivariateObservations) -> CovarianceModel {
    let (v, c) = sample_moments(obs);
    let rho = (c / (v[0] * v[1]).sqrt()).clamp(-0.9, 0.9);
    let a = 0.1 * diameter(obs);
    CovarianceModel::matern(MaternParams::parsimonious(0.9 * v[0], 0.9 * v[1], rho, 1.0, 1.0, a, a))
        .with_nugget([0.1 * v[0], 0.1 * v[1]])
}

/// Data-driven starting point for a rank-2 LMC: weights from the Cholesky
/// factor of the sample covariance, two latent ranges.
pub fn initial_lmc(obs: &BivariateObservations) -> CovarianceModel {
    let (v, c) = sample_moments(obs);
    let (v1, v2) = (0.9 * v[0], 0.9 * v[1]);
    let c = (0.9 * c).clamp(-0.95 * (v1 * v2).sqrt(), 0.95 * (v1 * v2).sqrt());
    let l11 = v1.sqrt();
    let l21 = c / l11;
    let l22 = (v2 - l21 * l21).max(1e-6 * v2).sqrt();
    let d = diameter(obs);
    CovarianceModel::lmc(LmcParams {
        a: [vec![l11, 0.0], vec![l21, l22]],
        latent: vec![
            LatentCorrelation { nu: 1.0, alpha: 0.05 * d },
            LatentCorrelation { nu: 1.0, alpha: 0.15 * d },
        ],
    })
    .with_nugget([0.1 * v[0], 0.1 * v[1]])
}

/// Rectangular tiles, each fitted independently; a target is predicted by
/// the tile it falls in, or the nearest tile centre when outside.
#[derive(Debug, Clone)]
pub struct TiledCokriging {
    bounds: Bounds,
    nx: usize,
    ny: usize,
    /// Row-major over `(ix, iy)`; `None` for tiles without data.
    tiles: Vec<Option<CokrigingModel>>,
}

impl TiledCokriging {
    fn tile_of(bounds: &Bounds, nx: usize, ny: usize, s: &Site) -> usize {
        let fx = (s.x - bounds.x_min) / (bounds.x_max - bounds.x_min);
        let fy = (s.y - bounds.y_min) / (bounds.y_max - bounds.y_min);
        let ix = ((fx * nx as f64).floor().max(0.0) as usize).min(nx - 1);
        let iy = ((fy * ny as f64).floor().max(0.0) as usize).min(ny - 1);
        iy * nx + ix
    }

    fn centre(&self, t: usize) -> Site {
        let (ix, iy) = (t % self.nx, t / self.nx);
        let w = (self.bounds.x_max - self.bounds.x_min) / self.nx as f64;
        let h = (self.bounds.y_max - self.bounds.y_min) / self.ny as f64;
        Site {
            x: self.bounds.x_min + (ix as f64 + 0.5) * w,
            y: self.bounds.y_min + (iy as f64 + 0.5) * h,
        }
    }

    /// Fits one model per tile. `fit_tile` receives the tile's data and
    /// returns the covariance model to condition on (fixed or estimated).
    pub fn fit<F>(obs: &BivariateObservations, nx: usize, ny: usize, fit_tile: F) -> Result<Self>
    where
        F: Fn(&BivariateObservations) -> Result<CovarianceModel> + Sync,
    {
        if nx == 0 || ny == 0 {
            return Err(Error::Config("tile counts must be >= 1".into()));
        }
        let bounds = Bounds::enclosing(&obs.sites);
        let mut members = vec![Vec::new(); nx * ny];
        for (i, s) in obs.sites.sites().iter().enumerate() {
            members[Self::tile_of(&bounds, nx, ny, s)].push(i);
        }
        let tiles = members
            .par_iter()
            .map(|idx| {
                if idx.len() < 2 {
                    return Ok(None);
                }
                let sub = obs.subset(idx)?;
                let cov = fit_tile(&sub)?;
                Ok(Some(CokrigingModel::fit(&cov, &sub, None)?))
            })
            .collect::<Result<Vec<_>>>()?;
        if tiles.iter().all(Option::is_none) {
            return Err(Error::Fit("no tile has enough data".into()));
        }
        Ok(TiledCokriging { bounds, nx, ny, tiles })
    }

    pub fn n_tiles(&self) -> usize {
        self.tiles.iter().filter(|t| t.is_some()).count()
    }

    pub fn predict(&self, sites: &SiteSet) -> Result<CokrigingPrediction> {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.tiles.len()];
        for (i, s) in sites.sites().iter().enumerate() {
            let mut t = Self::tile_of(&self.bounds, self.nx, self.ny, s);
            if self.tiles[t].is_none() {
                t = (0..self.tiles.len())
                    .filter(|&k| self.tiles[k].is_some())
                    .min_by(|&a, &b| self.centre(a).distance(s).total_cmp(&self.centre(b).distance(s)))
                    .expect("at least one fitted tile");
            }
            groups[t].push(i);
        }
        let mut mean = vec![[0.0; 2]; sites.len()];
        let mut cov = vec![[[0.0; 2]; 2]; sites.len()];
        for (t, idx) in groups.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let model = self.tiles[t].as_ref().expect("grouped only onto fitted tiles");
            let p = model.predict(&sites.subset(idx)?, None)?;
            for (k, &i) in idx.iter().enumerate() {
                mean[i] = p.mean[k];
                cov[i] = p.cov[k];
            }
        }
        Ok(CokrigingPrediction { mean, cov })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::sample_gp;
    use proptest::prelude::*;

    fn dense_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
        a.clone().try_inverse().expect("invertible")
    }

    /// Textbook formulas with explicit inverses.
    fn dense_oracle(
        cov: &CovarianceModel,
        obs: &BivariateObservations,
        s0: &Site,
    ) -> ([f64; 2], [[f64; 2]; 2]) {
        let n = obs.len();
        let c = cov.assemble(&obs.sites).unwrap();
        let ci = dense_inverse(&c);
        let x = design_matrix(n, None).unwrap();
        let z = DVector::from_vec(obs.stacked());
        let v = dense_inverse(&(x.transpose() * &ci * &x));
        let beta = &v * x.transpose() * &ci * &z;
        let mut c0 = DMatrix::zeros(2 * n, 2);
        for i in 0..n {
            let k = cov.cross_cov(&obs.sites.get(i), s0).unwrap();
            c0[(i, 0)] = k[0][0];
            c0[(i, 1)] = k[0][1];
            c0[(n + i, 0)] = k[1][0];
            c0[(n + i, 1)] = k[1][1];
        }
        let x0 = DMatrix::<f64>::identity(2, 2);
        let mean = &x0 * &beta + c0.transpose() * &ci * (&z - &x * &beta);
        let k00 = cov.cross_cov(s0, s0).unwrap();
        let c00 = DMatrix::from_fn(2, 2, |a, b| k00[a][b] + if a == b { cov.nugget[a] } else { 0.0 });
        let u = x0.transpose() - x.transpose() * &ci * &c0;
        let pc = c00 - c0.transpose() * &ci * &c0 + u.transpose() * &v * &u;
        ([mean[0], mean[1]], [[pc[(0, 0)], pc[(0, 1)]], [pc[(1, 0)], pc[(1, 1)]]])
    }

    fn toy_matern() -> CovarianceModel {
        CovarianceModel::matern(MaternParams::simulation_default())
    }

    fn toy_lmc() -> CovarianceModel {
        CovarianceModel::lmc(LmcParams {
            a: [vec![1.0, 0.4], vec![-0.5, 0.8]],
            latent: vec![LatentCorrelation { nu: 0.5, alpha: 0.3 }, LatentCorrelation { nu: 1.5, alpha: 0.2 }],
        })
    }

    fn random_obs(n: usize, seed: u64) -> BivariateObservations {
        use rand::Rng as _;
        let mut g = rng::from_seed(seed);
        let coords: Vec<_> = (0..n).map(|_| (g.random::<f64>(), g.random::<f64>())).collect();
        let z1 = (0..n).map(|_| g.random::<f64>() * 2.0 - 1.0).collect();
        let z2 = (0..n).map(|_| g.random::<f64>() * 3.0).collect();
        BivariateObservations::new(SiteSet::from_coords(&coords).unwrap(), z1, z2).unwrap()
    }

    #[test]
    fn identity_covariance_gives_sample_means() {
        let obs = random_obs(7, 1);
        let x = design_matrix(7, None).unwrap();
        let b = gls_beta(&DMatrix::identity(14, 14), &x, &DVector::from_vec(obs.stacked())).unwrap();
        let m1 = obs.z1.iter().sum::<f64>() / 7.0;
        let m2 = obs.z2.iter().sum::<f64>() / 7.0;
        assert!((b[0] - m1).abs() < 1e-12 && (b[1] - m2).abs() < 1e-12);
    }

    #[test]
    fn two_site_system_matches_dense_solve_and_ignores_scale() {
        let obs = BivariateObservations::new(
            SiteSet::from_coords(&[(0.0, 0.0), (0.3, 0.1)]).unwrap(),
            vec![1.0, 2.5],
            vec![-0.5, 0.75],
        )
        .unwrap();
        let c = toy_matern().assemble(&obs.sites).unwrap();
        let x = design_matrix(2, None).unwrap();
        let z = DVector::from_vec(obs.stacked());
        let b = gls_beta(&c, &x, &z).unwrap();
        let ci = dense_inverse(&c);
        let want = dense_inverse(&(x.transpose() * &ci * &x)) * x.transpose() * &ci * &z;
        assert!((&b - &want).amax() < 1e-10);
        let scaled = gls_beta(&(&c * 7.5), &x, &z).unwrap();
        assert!((&scaled - &b).amax() < 1e-10);
        // residual orthogonality
        let r = &z - &x * &b;
        assert!((x.transpose() * &ci * r).amax() < 1e-8);
    }

    #[test]
    fn dependent_column_is_named() {
        let cov = DMatrix::from_fn(5, 2, |i, j| if j == 0 { i as f64 } else { 2.0 * i as f64 });
        let x = design_matrix(5, Some(&cov)).unwrap();
        let err = gls_beta(&DMatrix::identity(10, 10), &x, &DVector::zeros(10)).unwrap_err();
        assert!(matches!(err, Error::Singular { column: 2 }), "{err}");
    }

    #[test]
    fn interpolates_training_sites_without_nugget() {
        let obs = random_obs(12, 4);
        let m = CokrigingModel::fit(&toy_matern(), &obs, None).unwrap();
        let p = m.predict(&obs.sites, None).unwrap();
        for i in 0..obs.len() {
            assert!((p.mean[i][0] - obs.z1[i]).abs() < 1e-8);
            assert!((p.mean[i][1] - obs.z2[i]).abs() < 1e-8);
            assert!(p.cov[i].iter().flatten().all(|v| v.abs() < 1e-8));
        }
    }

    #[test]
    fn nugget_smooths_between_trend_and_data() {
        let obs = random_obs(12, 5);
        let m = CokrigingModel::fit(&toy_matern().with_nugget([0.3, 0.3]), &obs, None).unwrap();
        let p = m.predict(&obs.sites, None).unwrap();
        let off = (0..obs.len()).filter(|&i| (p.mean[i][0] - obs.z1[i]).abs() > 1e-6).count();
        assert!(off > 0);
        assert!(p.cov.iter().all(|c| c[0][0] > 0.0 && c[1][1] > 0.0));
    }

    #[test]
    fn far_away_site_falls_back_to_trend() {
        let obs = random_obs(10, 6);
        let m = CokrigingModel::fit(&toy_matern(), &obs, None).unwrap();
        let p = m.predict(&SiteSet::from_coords(&[(1e4, 1e4)]).unwrap(), None).unwrap();
        assert!((p.mean[0][0] - m.beta()[0]).abs() < 1e-10);
        assert!((p.mean[0][1] - m.beta()[1]).abs() < 1e-10);
    }

    #[test]
    fn three_site_matern_matches_dense_oracle() {
        let obs = random_obs(3, 7);
        let cov = toy_matern().with_nugget([0.05, 0.1]);
        let m = CokrigingModel::fit(&cov, &obs, None).unwrap();
        let s0 = Site::new(0.41, 0.63).unwrap();
        let p = m.predict(&SiteSet::new(vec![s0]).unwrap(), None).unwrap();
        let (mean, pc) = dense_oracle(&cov, &obs, &s0);
        for u in 0..2 {
            assert!((p.mean[0][u] - mean[u]).abs() < 1e-8);
            for v in 0..2 {
                assert!((p.cov[0][u][v] - pc[u][v]).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_fixtures_match_dense_oracle(n in 2usize..=20, seed in 0u64..1000, lmc in any::<bool>(), nug in 0.0f64..0.2) {
            let obs = random_obs(n, seed);
            let cov = if lmc { toy_lmc() } else { toy_matern() }.with_nugget([nug, 0.5 * nug]);
            let m = CokrigingModel::fit(&cov, &obs, None).unwrap();
            let targets = random_obs(3, seed + 9999).sites;
            let p = m.predict(&targets, None).unwrap();
            for (k, s0) in targets.sites().iter().enumerate() {
                let (mean, pc) = dense_oracle(&cov, &obs, s0);
                for u in 0..2 {
                    prop_assert!((p.mean[k][u] - mean[u]).abs() < 1e-8);
                    for v in 0..2 {
                        prop_assert!((p.cov[k][u][v] - pc[u][v]).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn likelihood_of_white_noise_at_zero_residual() {
        // C = I (white noise, unit variances), Z constant so r = 0
        let white = CovarianceModel::lmc(LmcParams {
            a: [vec![1.0, 0.0], vec![0.0, 1.0]],
            latent: vec![LatentCorrelation { nu: 0.5, alpha: 1e-9 }; 2],
        });
        let obs = BivariateObservations::new(
            SiteSet::from_coords(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]).unwrap(),
            vec![2.0; 3],
            vec![-1.0; 3],
        )
        .unwrap();
        let nll = neg_log_likelihood(&white, &obs, &design_matrix(3, None).unwrap()).unwrap();
        assert!((nll - 3.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_site_likelihood_matches_density() {
        let obs = random_obs(2, 8);
        let cov = toy_lmc().with_nugget([0.1, 0.2]);
        let c = cov.assemble(&obs.sites).unwrap();
        let x = design_matrix(2, None).unwrap();
        let z = DVector::from_vec(obs.stacked());
        let ci = dense_inverse(&c);
        let beta = dense_inverse(&(x.transpose() * &ci * &x)) * x.transpose() * &ci * &z;
        let r = &z - &x * &beta;
        let want = 0.5 * c.determinant().ln() + 0.5 * (r.transpose() * &ci * &r)[(0, 0)] + 2.0 * (2.0 * std::f64::consts::PI).ln();
        let got = neg_log_likelihood(&cov, &obs, &x).unwrap();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn indefinite_covariance_is_infinite() {
        let mut p = MaternParams::simulation_default();
        p.cross_range = crate::covariance::CrossRange::Min;
        let cov = CovarianceModel::matern(p);
        let sites = SiteSet::grid(20, 20, (0.0, 1.0), (0.0, 1.0)).unwrap();
        let obs = BivariateObservations::new(sites, vec![0.0; 400], vec![0.0; 400]).unwrap();
        let nll = neg_log_likelihood(&cov, &obs, &design_matrix(400, None).unwrap()).unwrap();
        assert!(nll.is_infinite());
    }

    #[test]
    fn pack_round_trip() {
        for m in [toy_matern().with_nugget([0.1, 0.2]), toy_lmc().with_nugget([0.05, 0.0])] {
            let back = unpack(&m, &pack(&m, true), true);
            assert!((pack(&back, true).iter().zip(pack(&m, true)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)) < 1e-12);
            assert_eq!(unpack(&m, &pack(&m, false), false), m);
        }
    }

    #[test]
    fn search_from_truth_does_not_increase_objective() {
        let sites = SiteSet::grid(8, 8, (0.0, 1.0), (0.0, 1.0)).unwrap();
        let truth = toy_matern();
        let obs = sample_gp(&truth, &sites, 3).unwrap();
        let fit = fit_mle(
            &truth,
            &obs,
            None,
            &MleConfig {
                simplex: SimplexConfig { max_evals: 60, ..SimplexConfig::default() },
                fit_nugget: false,
                ..MleConfig::default()
            },
        )
        .unwrap();
        assert!(fit.nll <= fit.initial_nll);
    }

    #[test]
    fn lmc_fit_improves_on_its_start() {
        let sites = SiteSet::grid(9, 9, (0.0, 1.0), (0.0, 1.0)).unwrap();
        let obs = sample_gp(&toy_lmc(), &sites, 21).unwrap();
        let init = initial_lmc(&obs);
        let fit = fit_mle(
            &init,
            &obs,
            None,
            &MleConfig {
                simplex: SimplexConfig { max_evals: 150, ..SimplexConfig::default() },
                ..MleConfig::default()
            },
        )
        .unwrap();
        assert!(fit.nll < fit.initial_nll);
        fit.model.validate().unwrap();
    }

    #[test]
    fn tiles_cover_every_target() {
        let obs = random_obs(60, 12);
        let tiled = TiledCokriging::fit(&obs, 2, 2, |_| Ok(toy_matern().with_nugget([0.01, 0.01]))).unwrap();
        assert_eq!(tiled.n_tiles(), 4);
        let p = tiled.predict(&SiteSet::from_coords(&[(0.1, 0.1), (0.9, 0.9), (5.0, -3.0)]).unwrap()).unwrap();
        assert_eq!(p.mean.len(), 3);
        assert!(p.mean.iter().flatten().all(|v| v.is_finite()));
        // a target inside a tile equals the single-tile model
        let b = Bounds::enclosing(&obs.sites);
        let mid = ((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0);
        let idx: Vec<usize> = (0..obs.len())
            .filter(|&i| obs.sites.get(i).x < mid.0 && obs.sites.get(i).y < mid.1)
            .collect();
        let single = CokrigingModel::fit(&toy_matern().with_nugget([0.01, 0.01]), &obs.subset(&idx).unwrap(), None).unwrap();
        let q = SiteSet::from_coords(&[(b.x_min + 0.01, b.y_min + 0.01)]).unwrap();
        let want = single.predict(&q, None).unwrap();
        let got = tiled.predict(&q).unwrap();
        assert!((want.mean[0][0] - got.mean[0][0]).abs() < 1e-12);
    }

    #[test]
    fn gaussian_bounds_use_normal_quantile() {
        let p = CokrigingPrediction {
            mean: vec![[1.0, 0.0]],
            cov: vec![[[4.0, 0.0], [0.0, 0.0]]],
        };
        let (lo, hi) = p.bounds(0, 0.05).unwrap();
        // z_{0.975} = 1.959964
        assert!((hi[0] - 1.0 - 2.0 * 1.959964).abs() < 1e-5);
        assert!((lo[0] - 1.0 + 2.0 * 1.959964).abs() < 1e-5);
        assert_eq!(p.bounds(1, 0.05).unwrap(), (vec![0.0], vec![0.0]));
    }
}
