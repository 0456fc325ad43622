//! Matérn correlation and bivariate cross-covariance models.
//!
//! Two families are supported:
//!
//! * the flexible bivariate Matérn, `C_uv(h) = sigma_uv M(h | nu_uv, alpha_uv)`
//!   with `sigma_12 = rho * sqrt(sigma2_1 * sigma2_2)`;
//! * the linear model of coregionalization,
//!   `C_ij(h) = sum_k rho_k(h) A_ik A_jk` with Matérn latent correlations.
//!
//! Assembled matrices follow the stacked ordering: all variable-1 rows, then
//! all variable-2 rows.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};
use crate::spatial::{Site, SiteSet};
use crate::special::{bessel_k_unchecked, gamma};

/// Matérn correlation with precomputed normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Matern {
    nu: f64,
    alpha: f64,
    norm: f64,
    closed: Option<HalfInteger>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum HalfInteger {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl Matern {
    pub fn new(nu: f64, alpha: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) || !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Argument(format!(
                "Matérn smoothness and range must be positive, got nu = {nu}, alpha = {alpha}"
            )));
        }
        let closed = if nu == 0.5 {
            Some(HalfInteger::Half)
        } else if nu == 1.5 {
            Some(HalfInteger::ThreeHalves)
        } else if nu == 2.5 {
            Some(HalfInteger::FiveHalves)
        } else {
            None
        };
        Ok(Matern {
            nu,
            alpha,
            norm: 2f64.powf(1.0 - nu) / gamma(nu),
            closed,
        })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Correlation at lag `h >= 0`.
    #[inline]
    pub fn corr(&self, h: f64) -> f64 {
        if h <= 0.0 {
            return 1.0;
        }
        let x = h / self.alpha;
        match self.closed {
            Some(HalfInteger::Half) => (-x).exp(),
            Some(HalfInteger::ThreeHalves) => (1.0 + x) * (-x).exp(),
            Some(HalfInteger::FiveHalves) => (1.0 + x + x * x / 3.0) * (-x).exp(),
            None => self.corr_bessel_scaled(x),
        }
    }

    /// Correlation through the Bessel route regardless of `nu`.
    pub fn corr_bessel(&self, h: f64) -> f64 {
        if h <= 0.0 {
            return 1.0;
        }
        self.corr_bessel_scaled(h / self.alpha)
    }

    #[inline]
    fn corr_bessel_scaled(&self, x: f64) -> f64 {
        if x > 700.0 {
            return 0.0;
        }
        let v = self.norm * x.powf(self.nu) * bessel_k_unchecked(self.nu, x);
        v.min(1.0)
    }
}

/// Standard Matérn correlation
/// `2^{1-nu} / Gamma(nu) (h/alpha)^nu K_nu(h/alpha)`.
pub fn matern_corr(h: f64, nu: f64, alpha: f64) -> Result<f64> {
    if h.is_nan() || h < 0.0 {
        return Err(Error::Argument(format!("lag must be nonnegative, got {h}")));
    }
    Ok(Matern::new(nu, alpha)?.corr(h))
}

/// Rule for the cross-range `alpha_12` when it is not given explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossRange {
    /// `sqrt(alpha_1 * alpha_2)`.
    #[default]
    GeometricMean,
    Min,
    Max,
}

/// Parameters of the flexible bivariate Matérn model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaternParams {
    pub sigma2_1: f64,
    pub sigma2_2: f64,
    pub rho: f64,
    pub nu_1: f64,
    pub nu_2: f64,
    pub alpha_1: f64,
    pub alpha_2: f64,
    /// Cross smoothness; defaults to `(nu_1 + nu_2) / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_12: Option<f64>,
    /// Cross range; defaults to the `cross_range` rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_12: Option<f64>,
    #[serde(default)]
    pub cross_range: CrossRange,
}

impl MaternParams {
    /// Variances 0.89 and 1.3, cross-correlation 0.8, smoothness 0.8,
    /// ranges 0.2 and 0.4.
    pub fn simulation_default() -> Self {
        MaternParams::parsimonious(0.89, 1.3, 0.8, 0.8, 0.8, 0.2, 0.4)
    }

    /// Cross terms derived from the marginals.
    pub fn parsimonious(
        sigma2_1: f64,
        sigma2_2: f64,
        rho: f64,
        nu_1: f64,
        nu_2: f64,
        alpha_1: f64,
        alpha_2: f64,
    ) -> Self {
        MaternParams {
            sigma2_1,
            sigma2_2,
            rho,
            nu_1,
            nu_2,
            alpha_1,
            alpha_2,
            nu_12: None,
            alpha_12: None,
            cross_range: CrossRange::default(),
        }
    }

    pub fn cross_nu(&self) -> f64 {
        self.nu_12.unwrap_or(0.5 * (self.nu_1 + self.nu_2))
    }

    pub fn cross_alpha(&self) -> f64 {
        self.alpha_12.unwrap_or(match self.cross_range {
            CrossRange::GeometricMean => (self.alpha_1 * self.alpha_2).sqrt(),
            CrossRange::Min => self.alpha_1.min(self.alpha_2),
            CrossRange::Max => self.alpha_1.max(self.alpha_2),
        })
    }

    /// Cross covariance at zero lag, `rho * sqrt(sigma2_1 * sigma2_2)`.
    pub fn sigma_12(&self) -> f64 {
        self.rho * (self.sigma2_1 * self.sigma2_2).sqrt()
    }

    /// Largest `|rho|` for which the model is a valid covariance in the
    /// plane: `sqrt(inf_w f11(w) f22(w) / f12(w)^2)` over the Matérn
    /// spectral densities with unit variance.
    pub fn max_abs_rho(&self) -> f64 {
        let (n1, n2, n12) = (self.nu_1, self.nu_2, self.cross_nu());
        let (a1, a2, a12) = (1.0 / self.alpha_1, 1.0 / self.alpha_2, 1.0 / self.cross_alpha());
        let c = (n1 * n2 / (n12 * n12)).ln() + 2.0 * n1 * a1.ln() + 2.0 * n2 * a2.ln() - 4.0 * n12 * a12.ln();
        // log ratio as a function of t = w^2
        let log_ratio = |t: f64| {
            c + (2.0 * n12 + 2.0) * (a12 * a12 + t).ln() - (n1 + 1.0) * (a1 * a1 + t).ln() - (n2 + 1.0) * (a2 * a2 + t).ln()
        };
        let growth = 2.0 * n12 - n1 - n2;
        if growth < -1e-12 {
            return 0.0;
        }
        let lo = (a1 * a1).min(a2 * a2).min(a12 * a12).ln() - 15.0;
        let hi = (a1 * a1).max(a2 * a2).max(a12 * a12).ln() + 15.0;
        let steps = 600;
        let h = (hi - lo) / steps as f64;
        let mut best = (log_ratio(0.0), None);
        for k in 0..=steps {
            let v = log_ratio((lo + k as f64 * h).exp());
            if v < best.0 {
                best = (v, Some(k));
            }
        }
        if growth <= 1e-12 {
            // finite limit as w -> infinity
            best.0 = best.0.min(c);
        }
        // golden-section refinement around an interior grid minimum
        if let Some(k) = best.1 {
            let (mut x0, mut x1) = (lo + (k as f64 - 1.0) * h, lo + (k as f64 + 1.0) * h);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..60 {
                let xa = x1 - g * (x1 - x0);
                let xb = x0 + g * (x1 - x0);
                if log_ratio(xa.exp()) < log_ratio(xb.exp()) {
                    x1 = xb;
                } else {
                    x0 = xa;
                }
            }
            best.0 = best.0.min(log_ratio((0.5 * (x0 + x1)).exp()));
        }
        (0.5 * best.0).exp().min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("sigma2_1", self.sigma2_1),
            ("sigma2_2", self.sigma2_2),
            ("nu_1", self.nu_1),
            ("nu_2", self.nu_2),
            ("alpha_1", self.alpha_1),
            ("alpha_2", self.alpha_2),
            ("nu_12", self.cross_nu()),
            ("alpha_12", self.cross_alpha()),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        Ok(())
    }
}

/// One latent process of an LMC: its Matérn correlation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentCorrelation {
    pub nu: f64,
    pub alpha: f64,
}

/// Linear model of coregionalization with a `2 x r` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmcParams {
    /// Rows of `A`; each row has `r` entries.
    pub a: [Vec<f64>; 2],
    pub latent: Vec<LatentCorrelation>,
}

impl LmcParams {
    pub fn rank(&self) -> usize {
        self.latent.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.latent.len();
        if !(1..=2).contains(&r) {
            return Err(Error::Config(format!("LMC needs 1 or 2 latent processes, got {r}")));
        }
        if self.a[0].len() != r || self.a[1].len() != r {
            return Err(Error::Config(format!("LMC weight rows must have {r} entries")));
        }
        if self.a.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("LMC weights must be finite".into()));
        }
        for l in &self.latent {
            Matern::new(l.nu, l.alpha).map_err(|e| Error::Config(e.to_string()))?;
        }
        // full rank
        let rank_ok = if r == 2 {
            (self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]).abs() > 1e-12
        } else {
            self.a[0][0].abs() + self.a[1][0].abs() > 0.0
        };
        if !rank_ok {
            return Err(Error::Config("LMC weight matrix is not full rank".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CovarianceFamily {
    Matern(MaternParams),
    Lmc(LmcParams),
}

/// A bivariate covariance model with per-variable nugget variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceModel {
    #[serde(flatten)]
    pub family: CovarianceFamily,
    #[serde(default)]
    pub nugget: [f64; 2],
}

impl CovarianceModel {
    pub fn matern(params: MaternParams) -> Self {
        CovarianceModel {
            family: CovarianceFamily::Matern(params),
            nugget: [0.0, 0.0],
        }
    }

    pub fn lmc(params: LmcParams) -> Self {
        CovarianceModel {
            family: CovarianceFamily::Lmc(params),
            nugget: [0.0, 0.0],
        }
    }

    pub fn with_nugget(mut self, nugget: [f64; 2]) -> Self {
        self.nugget = nugget;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nugget.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!(
                "nugget variances must be nonnegative, got {:?}",
                self.nugget
            )));
        }
        match &self.family {
            CovarianceFamily::Matern(p) => p.validate(),
            CovarianceFamily::Lmc(p) => p.validate(),
        }
    }

    /// Precomputes the correlation kernels.
    pub fn kernel(&self) -> Result<CrossKernel> {
        self.validate()?;
        Ok(match &self.family {
            CovarianceFamily::Matern(p) => CrossKernel::Matern {
                m: [
                    Matern::new(p.nu_1, p.alpha_1)?,
                    Matern::new(p.cross_nu(), p.cross_alpha())?,
                    Matern::new(p.nu_2, p.alpha_2)?,
                ],
                sigma: [p.sigma2_1, p.sigma_12(), p.sigma2_2],
            },
            CovarianceFamily::Lmc(p) => {
                let mut terms = Vec::with_capacity(p.rank());
                for (k, l) in p.latent.iter().enumerate() {
                    let (a1, a2) = (p.a[0][k], p.a[1][k]);
                    terms.push((Matern::new(l.nu, l.alpha)?, [a1 * a1, a1 * a2, a2 * a2]));
                }
                CrossKernel::Lmc { terms }
            }
        })
    }

    /// 2x2 cross-covariance between two sites, nugget excluded.
    pub fn cross_cov(&self, si: &Site, sj: &Site) -> Result<[[f64; 2]; 2]> {
        let k = self.kernel()?.at(si.distance(sj));
        Ok([[k[0], k[1]], [k[1], k[2]]])
    }

    /// The `2N x 2N` covariance of the stacked responses, nugget included.
    pub fn assemble(&self, sites: &SiteSet) -> Result<DMatrix<f64>> {
        let kernel = self.kernel()?;
        Ok(kernel.assemble(sites.sites(), self.nugget))
    }

    /// Assembles and factors with the jitter policy.
    pub fn factor(&self, sites: &SiteSet) -> Result<Cholesky> {
        linalg::cholesky_jittered(&self.assemble(sites)?)
    }

    /// The same correlation structure with marginal variances `var`.
    pub fn with_marginal_variances(&self, var: [f64; 2]) -> Result<Self> {
        let mut out = self.clone();
        match &mut out.family {
            CovarianceFamily::Matern(p) => {
                p.sigma2_1 = var[0];
                p.sigma2_2 = var[1];
            }
            CovarianceFamily::Lmc(p) => {
                for (i, row) in p.a.iter_mut().enumerate() {
                    let cur: f64 = row.iter().map(|a| a * a).sum();
                    if cur <= 0.0 {
                        return Err(Error::Config(format!("LMC row {} has zero variance", i + 1)));
                    }
                    let scale = (var[i] / cur).sqrt();
                    row.iter_mut().for_each(|a| *a *= scale);
                }
            }
        }
        Ok(out)
    }

    /// Marginal variances at zero lag, nugget excluded.
    pub fn marginal_variances(&self) -> Result<[f64; 2]> {
        let k = self.kernel()?.at(0.0);
        Ok([k[0], k[2]])
    }
}

/// Evaluated kernels of a validated model.
#[derive(Debug, Clone)]
pub enum CrossKernel {
    Matern { m: [Matern; 3], sigma: [f64; 3] },
    Lmc { terms: Vec<(Matern, [f64; 3])> },
}

impl CrossKernel {
    /// `(C_11, C_12, C_22)` at lag `h`.
    #[inline]
    pub fn at(&self, h: f64) -> [f64; 3] {
        match self {
            CrossKernel::Matern { m, sigma } => {
                let c11 = sigma[0] * m[0].corr(h);
                let c22 = sigma[2] * m[2].corr(h);
                let c12 = if sigma[1] == 0.0 {
                    0.0
                } else if m[1] == m[0] {
                    sigma[1] * (c11 / sigma[0])
                } else {
                    sigma[1] * m[1].corr(h)
                };
                [c11, c12, c22]
            }
            CrossKernel::Lmc { terms } => {
                let mut out = [0.0; 3];
                for (m, w) in terms {
                    let r = m.corr(h);
                    out[0] += r * w[0];
                    out[1] += r * w[1];
                    out[2] += r * w[2];
                }
                out
            }
        }
    }

    /// Stacked covariance over `sites`.
    pub fn assemble(&self, sites: &[Site], nugget: [f64; 2]) -> DMatrix<f64> {
        let n = sites.len();
        let mut c = DMatrix::zeros(2 * n, 2 * n);
        for j in 0..n {
            for i in j..n {
                let k = self.at(sites[i].distance(&sites[j]));
                c[(i, j)] = k[0];
                c[(n + i, n + j)] = k[2];
                c[(n + i, j)] = k[1];
                c[(n + j, i)] = k[1];
                if i != j {
                    c[(j, i)] = k[0];
                    c[(n + j, n + i)] = k[2];
                    c[(i, n + j)] = k[1];
                    c[(j, n + i)] = k[1];
                }
            }
        }
        for i in 0..n {
            c[(i, n + i)] = c[(n + i, i)];
            c[(i, i)] += nugget[0];
            c[(n + i, n + i)] += nugget[1];
        }
        c
    }

    /// `2N x 2M` cross-covariance between stacked `rows` and stacked `cols`.
    pub fn cross(&self, rows: &[Site], cols: &[Site]) -> DMatrix<f64> {
        let (n, m) = (rows.len(), cols.len());
        let mut c = DMatrix::zeros(2 * n, 2 * m);
        for j in 0..m {
            for i in 0..n {
                let k = self.at(rows[i].distance(&cols[j]));
                c[(i, j)] = k[0];
                c[(i, m + j)] = k[1];
                c[(n + i, j)] = k[1];
                c[(n + i, m + j)] = k[2];
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lmc_example() -> LmcParams {
        LmcParams {
            a: [vec![1.2, 0.3], vec![-0.4, 0.9]],
            latent: vec![
                LatentCorrelation { nu: 0.8, alpha: 0.25 },
                LatentCorrelation { nu: 1.5, alpha: 0.1 },
            ],
        }
    }

    #[test]
    fn matern_special_values() {
        assert_eq!(matern_corr(0.0, 0.8, 0.3).unwrap(), 1.0);
        assert!((matern_corr(2.0, 0.5, 1.0).unwrap() - (-2f64).exp()).abs() < 1e-15);
        let (h, a): (f64, f64) = (0.2, 0.3);
        let x = h / a;
        let closed = (1.0 + x) * (-x).exp();
        assert!((matern_corr(h, 1.5, a).unwrap() - closed).abs() < 1e-10);
        assert!((Matern::new(1.5, a).unwrap().corr_bessel(h) - closed).abs() < 1e-10);
        // the sqrt(3)-scaled form is the same function with range a / sqrt(3)
        let t = 3f64.sqrt() * x;
        let scaled = (1.0 + t) * (-t).exp();
        let m = Matern::new(1.5, a / 3f64.sqrt()).unwrap();
        assert!((m.corr(h) - scaled).abs() < 1e-10);
        assert!((m.corr_bessel(h) - scaled).abs() < 1e-10);
        assert!(matern_corr(0.1, 0.0, 1.0).is_err());
        assert!(matern_corr(0.1, 1.0, -1.0).is_err());
        assert!(matern_corr(-0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn closed_forms_agree_with_bessel() {
        for nu in [0.5, 1.5, 2.5] {
            let m = Matern::new(nu, 0.37).unwrap();
            for h in [1e-4, 0.01, 0.1, 0.5, 1.0, 3.0] {
                assert!((m.corr(h) - m.corr_bessel(h)).abs() < 1e-12, "nu = {nu}, h = {h}");
            }
        }
    }

    #[test]
    fn matern_monotone_for_general_nu() {
        let m = Matern::new(0.8, 0.2).unwrap();
        let mut prev = 1.0;
        for i in 1..400 {
            let v = m.corr(i as f64 * 0.005);
            assert!(v < prev && v > 0.0);
            prev = v;
        }
    }

    #[test]
    fn lmc_identity_weights_at_zero() {
        let p = LmcParams {
            a: [vec![1.0, 0.0], vec![0.0, 1.0]],
            latent: vec![LatentCorrelation { nu: 0.5, alpha: 1.0 }; 2],
        };
        let s = Site::new(0.3, 0.3).unwrap();
        assert_eq!(CovarianceModel::lmc(p).cross_cov(&s, &s).unwrap(), [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn rho_bound_from_spectral_ratio() {
        // identical marginals and cross terms: ratio is 1 everywhere
        let same = MaternParams::parsimonious(1.0, 1.0, 0.5, 0.8, 0.8, 0.3, 0.3);
        assert!((same.max_abs_rho() - 1.0).abs() < 1e-12);
        // brute-force minimum of the density ratio on a fine grid
        for p in [
            MaternParams::simulation_default(),
            MaternParams::parsimonious(1.0, 2.0, 0.1, 0.6, 1.7, 0.1, 0.5),
        ] {
            let f = |nu: f64, a: f64, w: f64| nu * a.powf(2.0 * nu) / (a * a + w * w).powf(nu + 1.0);
            let (a1, a2, a12) = (1.0 / p.alpha_1, 1.0 / p.alpha_2, 1.0 / p.cross_alpha());
            let brute = (0..200_000)
                .map(|k| 1e-3 * 1.0001f64.powi(k))
                .map(|w| f(p.nu_1, a1, w) * f(p.nu_2, a2, w) / f(p.cross_nu(), a12, w).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            assert!((p.max_abs_rho() - brute.min(1.0)).abs() < 1e-6, "{} vs {}", p.max_abs_rho(), brute);
        }
        // the cross-range rule that was seen to break positive definiteness
        let mut tight = MaternParams::simulation_default();
        tight.cross_range = CrossRange::Min;
        assert!(tight.max_abs_rho() < 0.8);
        assert!(MaternParams::simulation_default().max_abs_rho() > 0.8);
    }

    #[test]
    fn simulation_profile_at_zero_lag() {
        let m = CovarianceModel::matern(MaternParams::simulation_default());
        let s = Site::new(0.5, 0.5).unwrap();
        let c = m.cross_cov(&s, &s).unwrap();
        assert!((c[0][0] - 0.89).abs() < 1e-15);
        assert!((c[1][1] - 1.3).abs() < 1e-15);
        let off = 0.8 * (0.89f64 * 1.3).sqrt();
        assert!((c[0][1] - off).abs() < 1e-15);
        assert!((c[0][1] - 0.860_511).abs() < 1e-6);
        assert_eq!(c[0][1], c[1][0]);
        let single = m.assemble(&SiteSet::new(vec![s]).unwrap()).unwrap();
        assert!((single[(0, 0)] - c[0][0]).abs() < 1e-15);
        assert!((single[(0, 1)] - c[0][1]).abs() < 1e-15);
        assert!((single[(1, 1)] - c[1][1]).abs() < 1e-15);
    }

    #[test]
    fn lmc_matches_termwise_sum() {
        let p = lmc_example();
        let m = CovarianceModel::lmc(p.clone());
        let si = Site::new(0.0, 0.0).unwrap();
        let sj = Site::new(0.1, 0.0).unwrap();
        let got = m.cross_cov(&si, &sj).unwrap();
        let mut expected = [[0.0; 2]; 2];
        for k in 0..2 {
            let r = matern_corr(0.1, p.latent[k].nu, p.latent[k].alpha).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    expected[i][j] += r * p.a[i][k] * p.a[j][k];
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((got[i][j] - expected[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn lmc_three_sites_factor_round_trip() {
        let sites = SiteSet::from_coords(&[(0.0, 0.0), (0.2, 0.1), (0.7, 0.4)]).unwrap();
        let c = CovarianceModel::lmc(lmc_example()).assemble(&sites).unwrap();
        let f = linalg::cholesky(&c).unwrap();
        assert!((f.l() * f.l().transpose() - &c).abs().max() < 1e-10);
    }

    #[test]
    fn invalid_models_rejected() {
        let mut p = MaternParams::simulation_default();
        p.rho = 1.0;
        assert!(matches!(CovarianceModel::matern(p).validate(), Err(Error::Config(_))));
        let p = LmcParams {
            a: [vec![1.0, 2.0], vec![2.0, 4.0]],
            latent: vec![LatentCorrelation { nu: 0.5, alpha: 1.0 }; 2],
        };
        assert!(CovarianceModel::lmc(p).validate().is_err());
        let m = CovarianceModel::matern(MaternParams::simulation_default()).with_nugget([-1.0, 0.0]);
        assert!(m.validate().is_err());
    }

    #[test]
    fn min_cross_range_is_indefinite_for_simulation_profile() {
        let mut p = MaternParams::simulation_default();
        p.cross_range = CrossRange::Min;
        let sites = SiteSet::grid(20, 20, (0.0, 1.0), (0.0, 1.0)).unwrap();
        let c = CovarianceModel::matern(p).assemble(&sites).unwrap();
        assert!(linalg::cholesky(&c).is_err());
        let ok = CovarianceModel::matern(MaternParams::simulation_default());
        assert!(linalg::cholesky(&ok.assemble(&sites).unwrap()).is_ok());
    }

    #[test]
    fn parsimonious_path_equals_explicit_cross_terms() {
        let p = MaternParams::simulation_default();
        let mut explicit = p.clone();
        explicit.nu_12 = Some(0.8);
        explicit.alpha_12 = Some((0.2f64 * 0.4).sqrt());
        let sites = SiteSet::from_coords(&[(0.0, 0.0), (0.3, 0.1), (0.5, 0.9)]).unwrap();
        let a = CovarianceModel::matern(p).assemble(&sites).unwrap();
        let b = CovarianceModel::matern(explicit).assemble(&sites).unwrap();
        assert!((a - b).abs().max() < 1e-15);
    }

    #[test]
    fn nugget_on_diagonal_blocks() {
        let sites = SiteSet::from_coords(&[(0.0, 0.0), (0.3, 0.1)]).unwrap();
        let base = CovarianceModel::matern(MaternParams::simulation_default());
        let a = base.assemble(&sites).unwrap();
        let b = base.with_nugget([0.1, 0.2]).assemble(&sites).unwrap();
        let d = b - a;
        assert!((d[(0, 0)] - 0.1).abs() < 1e-15 && (d[(1, 1)] - 0.1).abs() < 1e-15);
        assert!((d[(2, 2)] - 0.2).abs() < 1e-15 && (d[(3, 3)] - 0.2).abs() < 1e-15);
        assert_eq!(d[(0, 2)], 0.0);
    }

    #[test]
    fn rescaled_marginals() {
        let m = CovarianceModel::lmc(lmc_example()).with_marginal_variances([0.01, 0.02]).unwrap();
        let v = m.marginal_variances().unwrap();
        assert!((v[0] - 0.01).abs() < 1e-15 && (v[1] - 0.02).abs() < 1e-15);
        let m = CovarianceModel::matern(MaternParams::simulation_default())
            .with_marginal_variances([0.01, 0.01])
            .unwrap();
        let s = Site::new(0.0, 0.0).unwrap();
        assert!((m.cross_cov(&s, &s).unwrap()[0][1] - 0.008).abs() < 1e-15);
    }

    #[test]
    fn config_round_trip() {
        let m = CovarianceModel::lmc(lmc_example()).with_nugget([0.01, 0.02]);
        let text = toml::to_string(&m).unwrap();
        let back: CovarianceModel = toml::from_str(&text).unwrap();
        assert_eq!(back, m);
        let m = CovarianceModel::matern(MaternParams::simulation_default());
        let back: CovarianceModel = toml::from_str(&toml::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn assembled_matrix_symmetric_and_pd(
            coords in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..12),
            rho in -0.8f64..0.8,
            nu in 0.3f64..2.0,
            a1 in 0.05f64..0.5,
            ratio in 0.5f64..2.0,
            use_lmc in any::<bool>(),
            w in proptest::collection::vec(-1.5f64..1.5, 4),
        ) {
            let sites = SiteSet::from_coords(&coords).unwrap();
            let model = if use_lmc {
                let a = [vec![w[0], w[1]], vec![w[2], w[3]]];
                prop_assume!((w[0] * w[3] - w[1] * w[2]).abs() > 0.05);
                CovarianceModel::lmc(LmcParams {
                    a,
                    latent: vec![LatentCorrelation { nu, alpha: a1 }, LatentCorrelation { nu: 0.5, alpha: a1 * ratio }],
                })
            } else {
                CovarianceModel::matern(MaternParams::parsimonious(1.0, 2.0, rho, nu, nu, a1, a1 * ratio))
            }
            .with_nugget([1e-3, 1e-3]);
            let c = model.assemble(&sites).unwrap();
            prop_assert!((&c - c.transpose()).abs().max() < 1e-12);
            // with equal smoothness, nu <= 2 and a range ratio within 2 the
            // spectral bound on |rho| exceeds 0.83, so both families are valid
            prop_assert!(linalg::cholesky(&c).is_ok());
        }
    }
}
