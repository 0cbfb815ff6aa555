//! Finite measures on a discretized habitat.
//!
//! The habitat is a finite set of sites carrying an activity measure `π`
//! (one positive weight per site). Every integral against `π` becomes a
//! weighted sum, and a configuration of `N` particles scaled by `1/n` is a
//! vector of per-site counts.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Entropy density `φ(s) = s log s − s + 1`, extended by continuity with `φ(0) = 1`.
#[inline]
pub fn phi(s: f64) -> f64 {
    if s == 0.0 {
        1.0
    } else {
        s * s.ln() - s + 1.0
    }
}

/// Sites of the discretized habitat together with the activity measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SiteSpaceRepr", into = "SiteSpaceRepr")]
pub struct SiteSpace {
    coords: Vec<Vec<f64>>,
    weights: Vec<f64>,
    total_mass: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CoordsRepr {
    Line(Vec<f64>),
    Points(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SiteSpaceRepr {
    coords: CoordsRepr,
    weights: Vec<f64>,
}

impl TryFrom<SiteSpaceRepr> for SiteSpace {
    type Error = crate::Error;

    fn try_from(repr: SiteSpaceRepr) -> Result<Self> {
        let coords = match repr.coords {
            CoordsRepr::Line(xs) => xs.into_iter().map(|x| vec![x]).collect(),
            CoordsRepr::Points(ps) => ps,
        };
        SiteSpace::new(coords, repr.weights)
    }
}

impl From<SiteSpace> for SiteSpaceRepr {
    fn from(space: SiteSpace) -> Self {
        let coords = if space.dim() == 1 {
            CoordsRepr::Line(space.coords.iter().map(|p| p[0]).collect())
        } else {
            CoordsRepr::Points(space.coords)
        };
        SiteSpaceRepr {
            coords,
            weights: space.weights,
        }
    }
}

impl SiteSpace {
    pub fn new(coords: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(invalid("site space needs at least one site"));
        }
        if coords.len() != weights.len() {
            return Err(invalid(format!(
                "{} coordinates but {} weights",
                coords.len(),
                weights.len()
            )));
        }
        let dim = coords[0].len();
        if dim == 0 || coords.iter().any(|p| p.len() != dim) {
            return Err(invalid("coordinates must share a positive dimension"));
        }
        if coords.iter().flatten().any(|x| !x.is_finite()) {
            return Err(invalid("coordinates must be finite"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(invalid(format!("site weights must be positive, got {w}")));
        }
        for i in 0..coords.len() {
            for j in 0..i {
                if coords[i] == coords[j] {
                    return Err(invalid(format!("sites {j} and {i} coincide")));
                }
            }
        }
        let total_mass = weights.iter().sum();
        Ok(Self {
            coords,
            weights,
            total_mass,
        })
    }

    /// One-dimensional sites at the given positions.
    pub fn line(xs: &[f64], weights: Vec<f64>) -> Result<Self> {
        Self::new(xs.iter().map(|&x| vec![x]).collect(), weights)
    }

    /// `sites` equal cells partitioning `[a, b]`, located at the cell midpoints
    /// and weighted by the cell length (Lebesgue activity).
    pub fn uniform_grid(sites: usize, a: f64, b: f64) -> Result<Self> {
        if sites == 0 || !(b > a) {
            return Err(invalid("uniform grid needs sites >= 1 and b > a"));
        }
        let h = (b - a) / sites as f64;
        let xs: Vec<f64> = (0..sites).map(|i| a + (i as f64 + 0.5) * h).collect();
        Self::line(&xs, vec![h; sites])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.coords[0].len()
    }

    pub fn coords(&self) -> &[Vec<f64>] {
        &self.coords
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, site: usize) -> f64 {
        self.weights[site]
    }

    /// `π(X)`.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    /// Squared Euclidean distance between two sites.
    pub fn dist_sq(&self, a: usize, b: usize) -> f64 {
        self.coords[a]
            .iter()
            .zip(&self.coords[b])
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    }

    /// Displacement `x_a − x_b`.
    pub fn displacement(&self, a: usize, b: usize) -> Vec<f64> {
        self.coords[a]
            .iter()
            .zip(&self.coords[b])
            .map(|(x, y)| x - y)
            .collect()
    }
}

/// A scaled atomic measure `ν = (1/n) Σ_s k_s δ_{x_s}` stored as site counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Configuration {
    scale: u32,
    counts: Vec<u32>,
}

impl Configuration {
    pub fn new(scale: u32, counts: Vec<u32>) -> Result<Self> {
        if scale == 0 {
            return Err(invalid("population scale n must be positive"));
        }
        if counts.is_empty() {
            return Err(invalid("configuration needs at least one site"));
        }
        Ok(Self { scale, counts })
    }

    pub fn empty(scale: u32, sites: usize) -> Result<Self> {
        Self::new(scale, vec![0; sites])
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn sites(&self) -> usize {
        self.counts.len()
    }

    pub fn particles(&self) -> u64 {
        self.counts.iter().map(|&k| u64::from(k)).sum()
    }

    /// `‖ν‖ = N / n`.
    pub fn tv_mass(&self) -> f64 {
        self.particles() as f64 / f64::from(self.scale)
    }

    /// Per-site masses `ν_s = k_s / n`.
    pub fn masses(&self) -> Vec<f64> {
        let n = f64::from(self.scale);
        self.counts.iter().map(|&k| f64::from(k) / n).collect()
    }

    pub fn check_bound(&self, space: &SiteSpace) -> Result<()> {
        if self.counts.len() != space.len() {
            return Err(invalid(format!(
                "configuration has {} sites, space has {}",
                self.counts.len(),
                space.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn add(&mut self, site: usize) {
        self.counts[site] += 1;
    }

    pub(crate) fn remove(&mut self, site: usize) {
        debug_assert!(self.counts[site] > 0);
        self.counts[site] -= 1;
    }
}

/// Density `u = dν/dπ`, one nonnegative value per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DensityField(Vec<f64>);

impl TryFrom<Vec<f64>> for DensityField {
    type Error = crate::Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<DensityField> for Vec<f64> {
    fn from(u: DensityField) -> Self {
        u.0
    }
}

impl DensityField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!(
                "density values must be finite and >= 0, got {v}"
            )));
        }
        Ok(Self(values))
    }

    pub fn constant(sites: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; sites])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The measure `ν = uπ` as per-site masses.
    pub fn to_measure(&self, space: &SiteSpace) -> Vec<f64> {
        self.0
            .iter()
            .zip(space.weights())
            .map(|(u, w)| u * w)
            .collect()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A signed finite measure on the sites: fluxes, velocity fields, differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedSiteMeasure(pub Vec<f64>);

impl SignedSiteMeasure {
    pub fn zeros(sites: usize) -> Self {
        Self(vec![0.0; sites])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Total variation norm `Σ_s |m_s|`.
pub fn tv_norm(m: &SignedSiteMeasure) -> f64 {
    m.0.iter().map(|x| x.abs()).sum()
}

/// TV distance between two per-site mass vectors.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `u_s = k_s / (n π_s)`.
pub fn density_of(c: &Configuration, space: &SiteSpace) -> Result<DensityField> {
    c.check_bound(space)?;
    let n = f64::from(c.scale());
    Ok(DensityField(
        c.counts()
            .iter()
            .zip(space.weights())
            .map(|(&k, w)| f64::from(k) / (n * w))
            .collect(),
    ))
}

/// `Ent(uπ | π) = Σ_s π_s φ(u_s)`.
pub fn entropy_vs_activity(u: &DensityField, space: &SiteSpace) -> f64 {
    u.values()
        .iter()
        .zip(space.weights())
        .map(|(&u, w)| w * phi(u))
        .sum()
}

/// Kullback–Leibler divergence `Σ_{p_i > 0} p_i log(p_i / q_i)` in nats.
///
/// Returns `+∞` when `p` charges an index where `q` vanishes.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid("probability vectors differ in length"));
    }
    if p.iter().chain(q).any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(invalid(
            "probability vectors must be finite and nonnegative",
        ));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc.max(0.0))
}
