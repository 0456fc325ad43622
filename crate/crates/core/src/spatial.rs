//! Sites, paired observations, seeded splits and nearest-neighbour queries.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A location in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub x: f64,
    pub y: f64,
}

impl Site {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Argument(format!(
                "site coordinates must be finite, got ({x}, {y})"
            )));
        }
        Ok(Site { x, y })
    }

    /// Euclidean distance.
    #[inline]
    pub fn distance(&self, other: &Site) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Uniform bucket grid over the bounding box of a site set.
#[derive(Debug, Clone)]
struct GridIndex {
    x0: f64,
    y0: f64,
    cell_w: f64,
    cell_h: f64,
    nx: usize,
    ny: usize,
    /// Site indices per cell, row-major by (cy, cx), ascending.
    cells: Vec<Vec<usize>>,
}

impl GridIndex {
    fn build(sites: &[Site]) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for s in sites {
            x0 = x0.min(s.x);
            x1 = x1.max(s.x);
            y0 = y0.min(s.y);
            y1 = y1.max(s.y);
        }
        // About two sites per cell.
        let side = ((sites.len() as f64 / 2.0).sqrt().ceil() as usize).max(1);
        let (nx, ny) = (side, side);
        let cell_w = ((x1 - x0) / nx as f64).max(f64::MIN_POSITIVE);
        let cell_h = ((y1 - y0) / ny as f64).max(f64::MIN_POSITIVE);
        let mut index = GridIndex {
            x0,
            y0,
            cell_w,
            cell_h,
            nx,
            ny,
            cells: vec![Vec::new(); nx * ny],
        };
        for (i, s) in sites.iter().enumerate() {
            let (cx, cy) = index.cell_of(s);
            index.cells[cy * nx + cx].push(i);
        }
        index
    }

    fn cell_of(&self, s: &Site) -> (usize, usize) {
        let cx = ((s.x - self.x0) / self.cell_w).floor();
        let cy = ((s.y - self.y0) / self.cell_h).floor();
        let clamp = |v: f64, n: usize| -> usize {
            if v.is_nan() || v < 0.0 {
                0
            } else {
                (v as usize).min(n - 1)
            }
        };
        (clamp(cx, self.nx), clamp(cy, self.ny))
    }

    fn knn(&self, sites: &[Site], query: &Site, g: usize) -> Vec<(usize, f64)> {
        let (qx, qy) = self.cell_of(query);
        let max_ring = self.nx.max(self.ny);
        let step = self.cell_w.min(self.cell_h);
        let mut found: Vec<(usize, f64)> = Vec::new();
        for ring in 0..=max_ring {
            let r = ring as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx.abs() != r && dy.abs() != r {
                        continue;
                    }
                    let cx = qx as isize + dx;
                    let cy = qy as isize + dy;
                    if cx < 0 || cy < 0 || cx >= self.nx as isize || cy >= self.ny as isize {
                        continue;
                    }
                    for &i in &self.cells[cy as usize * self.nx + cx as usize] {
                        found.push((i, query.distance(&sites[i])));
                    }
                }
            }
            if found.len() >= g {
                sort_neighbours(&mut found);
                // Unvisited sites are at least `ring * step` away.
                if found[g - 1].1 < ring as f64 * step {
                    break;
                }
            }
        }
        sort_neighbours(&mut found);
        found.truncate(g);
        found
    }
}

fn sort_neighbours(v: &mut [(usize, f64)]) {
    v.sort_by(|a, b| match a.1.total_cmp(&b.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
}

/// An ordered, nonempty collection of sites. Row `i` of every matrix built
/// from a `SiteSet` corresponds to `sites()[i]`.
#[derive(Debug, Clone)]
pub struct SiteSet {
    sites: Vec<Site>,
    index: Option<GridIndex>,
}

impl PartialEq for SiteSet {
    fn eq(&self, other: &Self) -> bool {
        self.sites == other.sites
    }
}

impl SiteSet {
    pub fn new(sites: Vec<Site>) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::Argument("site set must be nonempty".into()));
        }
        if let Some(s) = sites.iter().find(|s| !s.x.is_finite() || !s.y.is_finite()) {
            return Err(Error::Argument(format!("non-finite site ({}, {})", s.x, s.y)));
        }
        Ok(SiteSet { sites, index: None })
    }

    pub fn from_coords(coords: &[(f64, f64)]) -> Result<Self> {
        let sites = coords
            .iter()
            .map(|&(x, y)| Site::new(x, y))
            .collect::<Result<Vec<_>>>()?;
        SiteSet::new(sites)
    }

    /// Regular `nx × ny` grid spanning the rectangle, edges included,
    /// x varying fastest.
    pub fn grid(nx: usize, ny: usize, x: (f64, f64), y: (f64, f64)) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Argument("grid needs at least one point per axis".into()));
        }
        let lin = |n: usize, lo: f64, hi: f64, i: usize| {
            if n == 1 {
                (lo + hi) / 2.0
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let mut sites = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                sites.push(Site::new(lin(nx, x.0, x.1, i), lin(ny, y.0, y.1, j))?);
            }
        }
        SiteSet::new(sites)
    }

    /// Attaches a bucket-grid index used by [`SiteSet::knn`].
    pub fn with_index(mut self) -> Self {
        self.index = Some(GridIndex::build(&self.sites));
        self
    }

    pub fn has_index(&self) -> bool {
        self.index.is_some()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn get(&self, i: usize) -> Site {
        self.sites[i]
    }

    /// Sites at the given positions, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        SiteSet::new(indices.iter().map(|&i| self.sites[i]).collect())
    }

    /// The `g` nearest sites to `query`, ascending by distance with ties
    /// going to the lower index.
    pub fn knn(&self, query: &Site, g: usize) -> Result<Vec<(usize, f64)>> {
        if g == 0 || g > self.sites.len() {
            return Err(Error::Argument(format!(
                "neighbour count {g} must be in 1..={}",
                self.sites.len()
            )));
        }
        match &self.index {
            Some(index) => Ok(index.knn(&self.sites, query, g)),
            None => Ok(knn_exhaustive(&self.sites, query, g)),
        }
    }
}

/// Exhaustive nearest-neighbour scan.
pub fn knn_exhaustive(sites: &[Site], query: &Site, g: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = sites
        .iter()
        .enumerate()
        .map(|(i, s)| (i, query.distance(s)))
        .collect();
    sort_neighbours(&mut all);
    all.truncate(g);
    all
}

/// Convenience wrapper over [`SiteSet::knn`].
pub fn knn(query: &Site, refs: &SiteSet, g: usize) -> Result<Vec<(usize, f64)>> {
    refs.knn(query, g)
}

/// Paired responses of two variables at a common set of sites.
#[derive(Debug, Clone, PartialEq)]
pub struct BivariateObservations {
    pub sites: SiteSet,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
}

impl BivariateObservations {
    pub fn new(sites: SiteSet, z1: Vec<f64>, z2: Vec<f64>) -> Result<Self> {
        if z1.len() != sites.len() || z2.len() != sites.len() {
            return Err(Error::Argument(format!(
                "response lengths ({}, {}) do not match {} sites",
                z1.len(),
                z2.len(),
                sites.len()
            )));
        }
        if z1.iter().chain(z2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Argument("responses must be finite".into()));
        }
        Ok(BivariateObservations { sites, z1, z2 })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(BivariateObservations {
            sites: self.sites.subset(indices)?,
            z1: indices.iter().map(|&i| self.z1[i]).collect(),
            z2: indices.iter().map(|&i| self.z2[i]).collect(),
        })
    }

    /// Stacked response `(z1[0..N], z2[0..N])`.
    pub fn stacked(&self) -> Vec<f64> {
        self.z1.iter().chain(self.z2.iter()).copied().collect()
    }
}

/// Fractions of a seeded random partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub fractions: Vec<f64>,
}

impl SplitSpec {
    pub fn new(seed: u64, fractions: Vec<f64>) -> Self {
        SplitSpec { seed, fractions }
    }

    /// Partition sizes for `n` items.
    pub fn sizes(&self, n: usize) -> Result<Vec<usize>> {
        if self.fractions.is_empty() {
            return Err(Error::Config("split needs at least one fraction".into()));
        }
        let total: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0) && *f != 1.0) || total > 1.0 + 1e-12
        {
            return Err(Error::Config(format!(
                "split fractions {:?} must lie in (0, 1] and sum to at most 1",
                self.fractions
            )));
        }
        let sizes: Vec<usize> = self
            .fractions
            .iter()
            .map(|f| (f * n as f64).round() as usize)
            .collect();
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!(
                "split fraction {} of {n} items yields an empty partition",
                self.fractions[k]
            )));
        }
        if sizes.iter().sum::<usize>() > n {
            return Err(Error::Config(format!(
                "split sizes {sizes:?} exceed {n} items"
            )));
        }
        Ok(sizes)
    }
}

/// Seeded partition of `0..n` into disjoint index sets.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<Vec<Vec<usize>>> {
    let sizes = spec.sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::from_seed(spec.seed));
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        out.push(order[start..start + s].to_vec());
        start += s;
    }
    Ok(out)
}

/// Seeded partition of observations; pairing of sites and responses is kept.
pub fn split(obs: &BivariateObservations, spec: &SplitSpec) -> Result<Vec<BivariateObservations>> {
    split_indices(obs.len(), spec)?
        .iter()
        .map(|idx| obs.subset(idx))
        .collect()
}

/// Indices not contained in `taken`, ascending.
pub fn complement(n: usize, taken: &[usize]) -> Vec<usize> {
    let mut mask = vec![false; n];
    for &i in taken {
        mask[i] = true;
    }
    (0..n).filter(|&i| !mask[i]).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationRow {
    x: f64,
    y: f64,
    z1: f64,
    z2: f64,
}

/// Reads `x,y,z1,z2` CSV.
pub fn read_observations<R: Read>(reader: R) -> Result<BivariateObservations> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["x", "y", "z1", "z2"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Format(format!(
            "expected header x,y,z1,z2, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let (mut sites, mut z1, mut z2) = (Vec::new(), Vec::new(), Vec::new());
    for (line, row) in rdr.deserialize::<ObservationRow>().enumerate() {
        let row = row?;
        if ![row.x, row.y, row.z1, row.z2].iter().all(|v| v.is_finite()) {
            return Err(Error::Format(format!("row {}: non-finite value", line + 1)));
        }
        sites.push(Site { x: row.x, y: row.y });
        z1.push(row.z1);
        z2.push(row.z2);
    }
    if sites.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }
    BivariateObservations::new(SiteSet::new(sites)?, z1, z2)
}

pub fn read_observations_file(path: &Path) -> Result<BivariateObservations> {
    let file = crate::error::open(path)?;
    read_observations(std::io::BufReader::new(file))
}

/// Writes `x,y,z1,z2` CSV using shortest round-trip float formatting.
pub fn write_observations<W: Write>(obs: &BivariateObservations, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (i, s) in obs.sites.sites().iter().enumerate() {
        wtr.serialize(ObservationRow {
            x: s.x,
            y: s.y,
            z1: obs.z1[i],
            z2: obs.z2[i],
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_observations_file(obs: &BivariateObservations, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_observations(obs, std::io::BufWriter::new(file))
}

/// Reads a CSV with at least `x,y` columns (extra columns ignored).
pub fn read_sites_file(path: &Path) -> Result<SiteSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(crate::error::open(path)?);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing column {name}")))
    };
    let (ix, iy) = (col("x")?, col("y")?);
    let mut sites = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            let v: f64 = rec
                .get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad number", line + 1)))?;
            if !v.is_finite() {
                return Err(Error::Format(format!("row {}: non-finite value", line + 1)));
            }
            Ok(v)
        };
        sites.push(Site { x: parse(ix)?, y: parse(iy)? });
    }
    SiteSet::new(sites)
}
