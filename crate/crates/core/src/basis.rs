//! Multiresolution Wendland radial-basis embedding of site coordinates.
//!
//! Each resolution level places a regular grid of knots over the domain
//! and evaluates the compactly supported Wendland function
//! `w(d) = (1-d)^6 / 3 * (35 d^2 + 18 d + 13)` for `0 <= d <= 1`
//! (zero beyond) at the scaled distance `d = |s - u| / theta_l`.
//! Coarse levels have wide support, fine levels narrow support.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{Site, SiteSet};

/// Value of the Wendland function at zero, its maximum.
pub const WENDLAND_MAX: f64 = 13.0 / 3.0;

/// Wendland function, checked.
pub fn wendland(d: f64) -> Result<f64> {
    if d.is_nan() || d < 0.0 {
        return Err(Error::Argument(format!(
            "Wendland distance must be nonnegative, got {d}"
        )));
    }
    Ok(wendland_unchecked(d))
}

#[inline]
pub(crate) fn wendland_unchecked(d: f64) -> f64 {
    if d > 1.0 {
        return 0.0;
    }
    let om = 1.0 - d;
    let om2 = om * om;
    om2 * om2 * om2 / 3.0 * (35.0 * d * d + 18.0 * d + 13.0)
}

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub const UNIT: Bounds = Bounds {
        x_min: 0.0,
        x_max: 1.0,
        y_min: 0.0,
        y_max: 1.0,
    };

    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let b = Bounds {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Config(format!("empty or non-finite bounds {self:?}")));
        }
        Ok(())
    }

    /// Bounding box of a site set; degenerate axes are widened by one unit.
    pub fn enclosing(sites: &SiteSet) -> Self {
        let mut b = Bounds {
            x_min: f64::MAX,
            x_max: f64::MIN,
            y_min: f64::MAX,
            y_max: f64::MIN,
        };
        for s in sites.sites() {
            b.x_min = b.x_min.min(s.x);
            b.x_max = b.x_max.max(s.x);
            b.y_min = b.y_min.min(s.y);
            b.y_max = b.y_max.max(s.y);
        }
        if b.x_max <= b.x_min {
            b.x_min -= 0.5;
            b.x_max += 0.5;
        }
        if b.y_max <= b.y_min {
            b.y_min -= 0.5;
            b.y_max += 0.5;
        }
        b
    }

    pub fn contains(&self, s: &Site) -> bool {
        s.x >= self.x_min && s.x <= self.x_max && s.y >= self.y_min && s.y <= self.y_max
    }
}

/// One resolution level: either a square grid with the given number of
/// knots, or an explicit knot list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BasisLevel {
    Grid(usize),
    Knots(Vec<[f64; 2]>),
}

impl BasisLevel {
    pub fn count(&self) -> usize {
        match self {
            BasisLevel::Grid(k) => *k,
            BasisLevel::Knots(k) => k.len(),
        }
    }
}

/// Per-level support radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Bandwidth {
    /// `theta_l = factor / sqrt(K_l)`.
    Scaled { factor: f64 },
    /// `theta_l = 1 / (factor * sqrt(K_l))`.
    InverseScaled { factor: f64 },
    /// One radius per level.
    Explicit { values: Vec<f64> },
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Scaled { factor: 2.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub levels: Vec<BasisLevel>,
    pub bounds: Bounds,
    #[serde(default)]
    pub bandwidth: Bandwidth,
}

impl BasisConfig {
    /// Grid levels over the given bounds with the default bandwidth rule.
    pub fn grid(counts: &[usize], bounds: Bounds) -> Self {
        BasisConfig {
            levels: counts.iter().map(|&k| BasisLevel::Grid(k)).collect(),
            bounds,
            bandwidth: Bandwidth::default(),
        }
    }

    /// Three levels of 25, 81 and 81 knots over the unit square.
    pub fn simulation_default() -> Self {
        BasisConfig::grid(&[25, 81, 81], Bounds::UNIT)
    }

    /// Total number of basis functions.
    pub fn total(&self) -> usize {
        self.levels.iter().map(BasisLevel::count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("basis needs at least one level".into()));
        }
        self.bounds.validate()?;
        for (l, level) in self.levels.iter().enumerate() {
            match level {
                BasisLevel::Grid(k) => {
                    if *k == 0 {
                        return Err(Error::Config(format!("level {l}: knot count must be >= 1")));
                    }
                    let side = (*k as f64).sqrt().round() as usize;
                    if side * side != *k {
                        return Err(Error::Config(format!(
                            "level {l}: knot count {k} is not a perfect square; \
                             give an explicit knot list instead"
                        )));
                    }
                }
                BasisLevel::Knots(k) => {
                    if k.is_empty() || k.iter().flatten().any(|v| !v.is_finite()) {
                        return Err(Error::Config(format!(
                            "level {l}: explicit knots must be nonempty and finite"
                        )));
                    }
                }
            }
        }
        for (l, t) in self.bandwidths()?.iter().enumerate() {
            if !(*t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("level {l}: bandwidth must be > 0, got {t}")));
            }
        }
        Ok(())
    }

    /// Support radius per level.
    pub fn bandwidths(&self) -> Result<Vec<f64>> {
        match &self.bandwidth {
            Bandwidth::Scaled { factor } => Ok(self
                .levels
                .iter()
                .map(|l| factor / (l.count() as f64).sqrt())
                .collect()),
            Bandwidth::InverseScaled { factor } => Ok(self
                .levels
                .iter()
                .map(|l| 1.0 / (factor * (l.count() as f64).sqrt()))
                .collect()),
            Bandwidth::Explicit { values } => {
                if values.len() != self.levels.len() {
                    return Err(Error::Config(format!(
                        "{} bandwidths given for {} levels",
                        values.len(),
                        self.levels.len()
                    )));
                }
                Ok(values.clone())
            }
        }
    }
}

/// Knot sites per level. Grid levels are `sqrt(K) x sqrt(K)` lattices
/// spanning the bounds with edges included, x varying slowest.
pub fn make_knots(cfg: &BasisConfig) -> Result<Vec<SiteSet>> {
    cfg.validate()?;
    cfg.levels
        .iter()
        .map(|level| match level {
            BasisLevel::Grid(k) => {
                let side = (*k as f64).sqrt().round() as usize;
                let b = &cfg.bounds;
                let lin = |lo: f64, hi: f64, i: usize| {
                    if side == 1 {
                        (lo + hi) / 2.0
                    } else {
                        lo + (hi - lo) * i as f64 / (side - 1) as f64
                    }
                };
                let mut knots = Vec::with_capacity(*k);
                for i in 0..side {
                    for j in 0..side {
                        knots.push(Site::new(lin(b.x_min, b.x_max, i), lin(b.y_min, b.y_max, j))?);
                    }
                }
                SiteSet::new(knots)
            }
            BasisLevel::Knots(points) => SiteSet::new(
                points
                    .iter()
                    .map(|p| Site::new(p[0], p[1]))
                    .collect::<Result<Vec<_>>>()?,
            ),
        })
        .collect()
}

/// Network input: basis values followed by covariate columns, one row per
/// site.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: DMatrix<f64>,
    pub col_names: Vec<String>,
    pub n_basis: usize,
}

impl FeatureMatrix {
    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    /// Writes the matrix as CSV with a header row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(&self.col_names)?;
        for i in 0..self.data.nrows() {
            wtr.write_record(self.data.row(i).iter().map(|v| v.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Precomputed knots and radii for repeated embedding.
#[derive(Debug, Clone)]
pub struct Embedder {
    knots: Vec<(Site, f64)>,
    names: Vec<String>,
}

impl Embedder {
    pub fn new(cfg: &BasisConfig) -> Result<Self> {
        let levels = make_knots(cfg)?;
        let radii = cfg.bandwidths()?;
        let mut knots = Vec::with_capacity(cfg.total());
        let mut names = Vec::with_capacity(cfg.total());
        for (l, (level, theta)) in levels.iter().zip(radii).enumerate() {
            for (b, s) in level.sites().iter().enumerate() {
                knots.push((*s, theta));
                names.push(format!("phi{}_{}", l + 1, b + 1));
            }
        }
        Ok(Embedder { knots, names })
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len()
    }

    pub fn embed(&self, sites: &SiteSet, covariates: Option<&DMatrix<f64>>) -> Result<FeatureMatrix> {
        let n = sites.len();
        let k = self.knots.len();
        let p = match covariates {
            Some(c) => {
                if c.nrows() != n {
                    return Err(Error::Argument(format!(
                        "covariates have {} rows for {n} sites",
                        c.nrows()
                    )));
                }
                c.ncols()
            }
            None => 0,
        };
        let mut data = DMatrix::zeros(n, k + p);
        for (b, (knot, theta)) in self.knots.iter().enumerate() {
            let mut col = data.column_mut(b);
            for (i, s) in sites.sites().iter().enumerate() {
                col[i] = wendland_unchecked(s.distance(knot) / theta);
            }
        }
        let mut col_names = self.names.clone();
        if let Some(c) = covariates {
            data.columns_mut(k, p).copy_from(c);
            col_names.extend((0..p).map(|j| format!("x{}", j + 1)));
        }
        Ok(FeatureMatrix {
            data,
            col_names,
            n_basis: k,
        })
    }
}

/// Embeds sites: entry `(i, b) = wendland(|s_i - u_b| / theta_level(b))`,
/// covariates appended unchanged.
pub fn embed(
    sites: &SiteSet,
    cfg: &BasisConfig,
    covariates: Option<&DMatrix<f64>>,
) -> Result<FeatureMatrix> {
    Embedder::new(cfg)?.embed(sites, covariates)
}
