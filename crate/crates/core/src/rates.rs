//! Birth, death and hopping rates satisfying detailed balance.
//!
//! A [`RateModel`] reports, for a scaled configuration `ν` given as per-site
//! masses:
//!
//! * `birth(ν, s)`: the mass `b_n(ν, {x_s})` of the birth measure on site `s`,
//! * `death(ν, s)`: the per-particle death rate `d_n(ν, x_s)`,
//! * `hop(ν, s, r)`: the mass `h_n(ν, x_s, {x_r})` that a particle at `s`
//!   jumps to `r`.
//!
//! The hop orientation is fixed here once: `hop(ν, s, r)` is always
//! *source `s`, target `r`*. The density rate `r_h(u, s, r)` transposes it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{Configuration, DensityField, SignedSiteMeasure, SiteSpace};

/// Which rate family to evaluate: the finite-`n` rates or their limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Finite(u32),
    Limit,
}

/// Declared suprema of `‖b(ν,·)‖`, `d(ν,x)` and `‖h(ν,x,·)‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    pub birth_total: f64,
    pub death: f64,
    pub hop_total: f64,
}

pub trait RateModel: Send + Sync {
    fn space(&self) -> &SiteSpace;

    fn birth(&self, nu: &[f64], site: usize, scale: Scale) -> f64;

    fn death(&self, nu: &[f64], site: usize, scale: Scale) -> f64;

    fn hop(&self, nu: &[f64], from: usize, to: usize, scale: Scale) -> f64;

    fn bounds(&self) -> RateBounds;

    /// True when no rate depends on the configuration, which lets simulators
    /// update propensities incrementally.
    fn is_configuration_independent(&self) -> bool {
        false
    }
}

impl<T: RateModel + ?Sized> RateModel for Box<T> {
    fn space(&self) -> &SiteSpace {
        (**self).space()
    }
    fn birth(&self, nu: &[f64], site: usize, scale: Scale) -> f64 {
        (**self).birth(nu, site, scale)
    }
    fn death(&self, nu: &[f64], site: usize, scale: Scale) -> f64 {
        (**self).death(nu, site, scale)
    }
    fn hop(&self, nu: &[f64], from: usize, to: usize, scale: Scale) -> f64 {
        (**self).hop(nu, from, to, scale)
    }
    fn bounds(&self) -> RateBounds {
        (**self).bounds()
    }
    fn is_configuration_independent(&self) -> bool {
        (**self).is_configuration_independent()
    }
}

impl<T: RateModel + ?Sized> RateModel for &T {
    fn space(&self) -> &SiteSpace {
        (**self).space()
    }
    fn birth(&self, nu: &[f64], site: usize, scale: Scale) -> f64 {
        (**self).birth(nu, site, scale)
    }
    fn death(&self, nu: &[f64], site: usize, scale: Scale) -> f64 {
        (**self).death(nu, site, scale)
    }
    fn hop(&self, nu: &[f64], from: usize, to: usize, scale: Scale) -> f64 {
        (**self).hop(nu, from, to, scale)
    }
    fn bounds(&self) -> RateBounds {
        (**self).bounds()
    }
    fn is_configuration_independent(&self) -> bool {
        (**self).is_configuration_independent()
    }
}

/// Bounded Lipschitz response functions, selected by name in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarFn {
    Constant {
        value: f64,
    },
    /// `clamp(intercept + slope·z, lo, hi)`
    AffineClamped {
        intercept: f64,
        slope: f64,
        lo: f64,
        hi: f64,
    },
    /// `low + (high − low) / (1 + exp(−steepness·(z − midpoint)))`
    Sigmoid {
        low: f64,
        high: f64,
        steepness: f64,
        midpoint: f64,
    },
    /// `scale / (1 + rate·max(z, 0))`
    Reciprocal {
        scale: f64,
        rate: f64,
    },
}

impl ScalarFn {
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            ScalarFn::Constant { value } => value,
            ScalarFn::AffineClamped {
                intercept,
                slope,
                lo,
                hi,
            } => (intercept + slope * z).clamp(lo, hi),
            ScalarFn::Sigmoid {
                low,
                high,
                steepness,
                midpoint,
            } => low + (high - low) / (1.0 + (-steepness * (z - midpoint)).exp()),
            ScalarFn::Reciprocal { scale, rate } => scale / (1.0 + rate * z.max(0.0)),
        }
    }

    pub fn sup(&self) -> f64 {
        match *self {
            ScalarFn::Constant { value } => value,
            ScalarFn::AffineClamped { hi, .. } => hi,
            ScalarFn::Sigmoid { low, high, .. } => low.max(high),
            ScalarFn::Reciprocal { scale, .. } => scale,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            ScalarFn::Constant { .. } => 0.0,
            ScalarFn::AffineClamped { slope, .. } => slope.abs(),
            ScalarFn::Sigmoid {
                low,
                high,
                steepness,
                ..
            } => 0.25 * (high - low).abs() * steepness.abs(),
            ScalarFn::Reciprocal { scale, rate } => scale * rate,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let params: Vec<f64> = match *self {
            ScalarFn::Constant { value } => vec![value],
            ScalarFn::AffineClamped {
                intercept,
                slope,
                lo,
                hi,
            } => vec![intercept, slope, lo, hi],
            ScalarFn::Sigmoid {
                low,
                high,
                steepness,
                midpoint,
            } => vec![low, high, steepness, midpoint],
            ScalarFn::Reciprocal { scale, rate } => vec![scale, rate],
        };
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "{name}: parameters must be finite"
            )));
        }
        let nonneg = match *self {
            ScalarFn::Constant { value } => value >= 0.0,
            ScalarFn::AffineClamped { lo, hi, .. } => lo >= 0.0 && lo <= hi,
            ScalarFn::Sigmoid { low, high, .. } => low >= 0.0 && high >= 0.0,
            ScalarFn::Reciprocal { scale, rate } => scale >= 0.0 && rate >= 0.0,
        };
        if !nonneg {
            return Err(Error::InvalidModel(format!("{name} must map into [0, ∞)")));
        }
        Ok(())
    }
}

/// Interaction kernel `c(x, y)` entering the birth/death response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PairKernelSpec {
    /// Explicit `S × S` matrix.
    Dense { values: Vec<Vec<f64>> },
    /// `c(s, r) = strength` for `s ≠ r`, zero on the diagonal.
    UniformOffDiagonal { strength: f64 },
    /// `amplitude·exp(−|x_s − x_r|² / (2 width²))` off the diagonal, zero on it.
    Gaussian { amplitude: f64, width: f64 },
}

impl PairKernelSpec {
    fn evaluate(&self, space: &SiteSpace) -> Result<Vec<f64>> {
        let s = space.len();
        let mut c = vec![0.0; s * s];
        match self {
            PairKernelSpec::Dense { values } => {
                if values.len() != s || values.iter().any(|row| row.len() != s) {
                    return Err(Error::InvalidModel(format!(
                        "competition kernel must be {s}×{s}"
                    )));
                }
                for (i, row) in values.iter().enumerate() {
                    c[i * s..(i + 1) * s].copy_from_slice(row);
                }
            }
            PairKernelSpec::UniformOffDiagonal { strength } => {
                for i in 0..s {
                    for j in 0..s {
                        if i != j {
                            c[i * s + j] = *strength;
                        }
                    }
                }
            }
            PairKernelSpec::Gaussian { amplitude, width } => {
                if !(*width > 0.0) {
                    return Err(Error::InvalidModel(
                        "gaussian width must be positive".into(),
                    ));
                }
                for i in 0..s {
                    for j in 0..s {
                        if i != j {
                            c[i * s + j] =
                                amplitude * (-space.dist_sq(i, j) / (2.0 * width * width)).exp();
                        }
                    }
                }
            }
        }
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidModel(
                "competition kernel must be finite".into(),
            ));
        }
        if let Some(i) = (0..s).find(|&i| c[i * s + i] != 0.0) {
            return Err(Error::InvalidModel(format!(
                "competition kernel must vanish on the diagonal: c({i},{i}) = {}",
                c[i * s + i]
            )));
        }
        Ok(c)
    }
}

/// Hop-crowding kernel `h(a, b)` of the displacements `a = x − z`, `b = y − z`.
///
/// On the grid it becomes the tensor `H[s][r][q] = h(x_s − x_q, x_r − x_q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HopKernelSpec {
    Constant {
        value: f64,
    },
    /// `amplitude·exp(−(|a|² + |b|²) / (2 width²))`
    Gaussian {
        amplitude: f64,
        width: f64,
    },
    /// Explicit `S × S × S` tensor indexed `[source][target][q]`.
    Dense {
        values: Vec<Vec<Vec<f64>>>,
    },
}

impl HopKernelSpec {
    fn evaluate(&self, space: &SiteSpace) -> Result<Vec<f64>> {
        let s = space.len();
        let mut h = vec![0.0; s * s * s];
        match self {
            HopKernelSpec::Constant { value } => h.fill(*value),
            HopKernelSpec::Gaussian { amplitude, width } => {
                if !(*width > 0.0) {
                    return Err(Error::InvalidModel(
                        "gaussian width must be positive".into(),
                    ));
                }
                let two_w2 = 2.0 * width * width;
                for i in 0..s {
                    for j in 0..s {
                        for q in 0..s {
                            let r2 = space.dist_sq(i, q) + space.dist_sq(j, q);
                            h[(i * s + j) * s + q] = amplitude * (-r2 / two_w2).exp();
                        }
                    }
                }
            }
            HopKernelSpec::Dense { values } => {
                let shape_ok = values.len() == s
                    && values
                        .iter()
                        .all(|m| m.len() == s && m.iter().all(|row| row.len() == s));
                if !shape_ok {
                    return Err(Error::InvalidModel(format!(
                        "hop kernel must be {s}×{s}×{s}"
                    )));
                }
                for i in 0..s {
                    for j in 0..s {
                        h[(i * s + j) * s..(i * s + j + 1) * s].copy_from_slice(&values[i][j]);
                    }
                }
            }
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidModel("hop kernel must be finite".into()));
        }
        check_hop_kernel(&h, s)?;
        Ok(h)
    }
}

// Detailed balance of the hopping part needs, on the grid,
//   H[s][r][q] = H[r][s][q]        (symmetry of h in its two arguments)
//   H[s][r][s] = H[s][r][r]        (h(a, 0) = h(0, −a))
fn check_hop_kernel(h: &[f64], s: usize) -> Result<()> {
    let scale = h.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let tol = 1e-12 * scale;
    let at = |i: usize, j: usize, q: usize| h[(i * s + j) * s + q];
    for i in 0..s {
        for j in 0..s {
            if i == j {
                continue;
            }
            for q in 0..s {
                if (at(i, j, q) - at(j, i, q)).abs() > tol {
                    return Err(Error::InvalidModel(format!(
                        "hop kernel not symmetric in source/target at ({i},{j},{q})"
                    )));
                }
            }
            if (at(i, j, i) - at(i, j, j)).abs() > tol {
                return Err(Error::InvalidModel(format!(
                    "hop kernel violates h(a,0) = h(0,-a) for pair ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// Parameters of the canonical detailed-balance rate family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleModelParams {
    pub psi_bd: ScalarFn,
    pub psi_h: ScalarFn,
    pub competition: PairKernelSpec,
    pub hop_kernel: HopKernelSpec,
}

/// `b(ν, dx) = ψ_bd(∫c(x,y)ν(dy)) π(dx) = d(ν, x) π(dx)` and
/// `h(ν, x, dy) = ψ_h(∫h(x−z, y−z)ν(dz)) π(dy)`.
///
/// Rates are `n`-independent unless a finite-`n` correction `η` is set, in
/// which case every finite-`n` rate is multiplied by `1 + η/n`. The factor is
/// common to birth, death and hopping so detailed balance holds for every `n`.
#[derive(Debug, Clone)]
pub struct ExampleModel {
    space: SiteSpace,
    params: ExampleModelParams,
    competition: Vec<f64>,
    hop_weights: Vec<f64>,
    finite_n_correction: f64,
}

pub fn make_example_model(params: ExampleModelParams, space: SiteSpace) -> Result<ExampleModel> {
    params.psi_bd.validate("psi_bd")?;
    params.psi_h.validate("psi_h")?;
    let competition = params.competition.evaluate(&space)?;
    let hop_weights = params.hop_kernel.evaluate(&space)?;
    Ok(ExampleModel {
        space,
        params,
        competition,
        hop_weights,
        finite_n_correction: 0.0,
    })
}

impl ExampleModel {
    pub fn with_finite_n_correction(mut self, eta: f64) -> Result<Self> {
        if !eta.is_finite() || eta <= -1.0 {
            return Err(Error::InvalidModel(
                "finite-n correction must be finite and > -1".into(),
            ));
        }
        self.finite_n_correction = eta;
        Ok(self)
    }

    pub fn params(&self) -> &ExampleModelParams {
        &self.params
    }

    fn factor(&self, scale: Scale) -> f64 {
        match scale {
            Scale::Finite(n) => 1.0 + self.finite_n_correction / f64::from(n),
            Scale::Limit => 1.0,
        }
    }

    fn competition_field(&self, nu: &[f64], site: usize) -> f64 {
        let s = self.space.len();
        self.competition[site * s..(site + 1) * s]
            .iter()
            .zip(nu)
            .map(|(c, m)| c * m)
            .sum()
    }

    fn hop_field(&self, nu: &[f64], from: usize, to: usize) -> f64 {
        let s = self.space.len();
        let base = (from * s + to) * s;
        self.hop_weights[base..base + s]
            .iter()
            .zip(nu)
            .map(|(h, m)| h * m)
            .sum()
    }

    /// A constant `L` with `‖V[ν] − V[η]‖ ≤ L(1 + ‖ν‖ + ‖η‖)‖ν − η‖` for the
    /// measure-valued mean-field vector field.
    pub fn velocity_lipschitz_bound(&self) -> f64 {
        let mass = self.space.total_mass();
        let c_max = self.competition.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let h_max = self.hop_weights.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let lip_bd = self.params.psi_bd.lipschitz() * c_max;
        let lip_h = self.params.psi_h.lipschitz() * h_max * mass;
        let b = RateModel::bounds(self);
        mass * lip_bd + b.death + 2.0 * b.hop_total + lip_bd + 2.0 * lip_h
    }
}

impl RateModel for ExampleModel {
    fn space(&self) -> &SiteSpace {
        &self.space
    }

    fn birth(&self, nu: &[f64], site: usize, scale: Scale) -> f64 {
        self.death(nu, site, scale) * self.space.weight(site)
    }

    fn death(&self, nu: &[f64], site: usize, scale: Scale) -> f64 {
        self.factor(scale) * self.params.psi_bd.eval(self.competition_field(nu, site))
    }

    fn hop(&self, nu: &[f64], from: usize, to: usize, scale: Scale) -> f64 {
        if from == to {
            return 0.0;
        }
        self.factor(scale)
            * self.params.psi_h.eval(self.hop_field(nu, from, to))
            * self.space.weight(to)
    }

    fn bounds(&self) -> RateBounds {
        let f = 1.0 + self.finite_n_correction.max(0.0);
        let mass = self.space.total_mass();
        RateBounds {
            birth_total: f * self.params.psi_bd.sup() * mass,
            death: f * self.params.psi_bd.sup(),
            hop_total: f * self.params.psi_h.sup() * mass,
        }
    }

    fn is_configuration_independent(&self) -> bool {
        matches!(self.params.psi_bd, ScalarFn::Constant { .. })
            && matches!(self.params.psi_h, ScalarFn::Constant { .. })
    }
}

/// Additive per-site offsets on birth and death rates. Used to inject
/// detailed-balance violations in validation runs.
#[derive(Debug, Clone)]
pub struct Perturbed<M> {
    inner: M,
    birth: Vec<f64>,
    death: Vec<f64>,
}

impl<M: RateModel> Perturbed<M> {
    pub fn new(inner: M, birth: Vec<f64>, death: Vec<f64>) -> Result<Self> {
        let s = inner.space().len();
        if birth.len() != s || death.len() != s {
            return Err(Error::InvalidModel(format!(
                "perturbations need {s} entries"
            )));
        }
        if birth
            .iter()
            .chain(&death)
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err(Error::InvalidModel(
                "perturbations must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            inner,
            birth,
            death,
        })
    }

    pub fn birth_at(inner: M, site: usize, eps: f64) -> Result<Self> {
        let s = inner.space().len();
        let mut birth = vec![0.0; s];
        *birth
            .get_mut(site)
            .ok_or_else(|| Error::InvalidModel(format!("site {site} out of range")))? = eps;
        Self::new(inner, birth, vec![0.0; s])
    }

    pub fn death_at(inner: M, site: usize, eps: f64) -> Result<Self> {
        let s = inner.space().len();
        let mut death = vec![0.0; s];
        *death
            .get_mut(site)
            .ok_or_else(|| Error::InvalidModel(format!("site {site} out of range")))? = eps;
        Self::new(inner, vec![0.0; s], death)
    }
}

impl<M: RateModel> RateModel for Perturbed<M> {
    fn space(&self) -> &SiteSpace {
        self.inner.space()
    }
    fn birth(&self, nu: &[f64], site: usize, scale: Scale) -> f64 {
        self.inner.birth(nu, site, scale) + self.birth[site]
    }
    fn death(&self, nu: &[f64], site: usize, scale: Scale) -> f64 {
        self.inner.death(nu, site, scale) + self.death[site]
    }
    fn hop(&self, nu: &[f64], from: usize, to: usize, scale: Scale) -> f64 {
        self.inner.hop(nu, from, to, scale)
    }
    fn bounds(&self) -> RateBounds {
        let b = self.inner.bounds();
        RateBounds {
            birth_total: b.birth_total + self.birth.iter().sum::<f64>(),
            death: b.death + self.death.iter().fold(0.0f64, |m, x| m.max(*x)),
            hop_total: b.hop_total,
        }
    }
    fn is_configuration_independent(&self) -> bool {
        self.inner.is_configuration_independent()
    }
}

/// Largest violation of the finite-`n` detailed-balance identities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DbReport {
    pub max_abs: f64,
    pub max_rel: f64,
}

impl DbReport {
    fn record(&mut self, lhs: f64, rhs: f64) {
        let abs = (lhs - rhs).abs();
        let scale = lhs.abs().max(rhs.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
    }

    pub fn merge(self, other: DbReport) -> DbReport {
        DbReport {
            max_abs: self.max_abs.max(other.max_abs),
            max_rel: self.max_rel.max(other.max_rel),
        }
    }
}

/// Checks `b_s(ν) = d(ν + e_s/n, s)·π_s` and
/// `h_{s→r}(ν)·π_s = h_{r→s}(ν + (e_r − e_s)/n)·π_r` over the samples.
///
/// The hopping identity is checked on configurations with a particle at `s`.
pub fn check_db_n<M: RateModel + ?Sized>(
    model: &M,
    samples: &[Configuration],
    n: u32,
) -> Result<DbReport> {
    let space = model.space();
    let s_count = space.len();
    let scale = Scale::Finite(n);
    let inv_n = 1.0 / f64::from(n);
    let mut report = DbReport::default();
    for c in samples {
        c.check_bound(space)?;
        if c.scale() != n {
            return Err(Error::InvalidInput(format!(
                "sample has scale {} but n = {n}",
                c.scale()
            )));
        }
        let nu = c.masses();
        let mut shifted = nu.clone();
        for s in 0..s_count {
            shifted[s] += inv_n;
            let rhs = model.death(&shifted, s, scale) * space.weight(s);
            shifted[s] = nu[s];
            report.record(model.birth(&nu, s, scale), rhs);
        }
        for s in 0..s_count {
            if c.counts()[s] == 0 {
                continue;
            }
            for r in 0..s_count {
                if r == s {
                    continue;
                }
                shifted[r] += inv_n;
                shifted[s] -= inv_n;
                let rhs = model.hop(&shifted, r, s, scale) * space.weight(r);
                shifted[r] = nu[r];
                shifted[s] = nu[s];
                report.record(model.hop(&nu, s, r, scale) * space.weight(s), rhs);
            }
        }
    }
    Ok(report)
}

/// Draws configurations with per-site counts uniform in `0..=max_count`.
pub fn random_configurations<R: Rng + ?Sized>(
    space: &SiteSpace,
    n: u32,
    count: usize,
    max_count: u32,
    rng: &mut R,
) -> Vec<Configuration> {
    (0..count)
        .map(|_| {
            let counts = (0..space.len())
                .map(|_| rng.random_range(0..=max_count))
                .collect();
            Configuration::new(n, counts).expect("positive scale")
        })
        .collect()
}

/// Density-form limit rates.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityRates {
    /// `r_b(u, s) = b_s(uπ) / π_s`
    pub birth: Vec<f64>,
    /// `r_d(u, s) = d(uπ, s)`
    pub death: Vec<f64>,
    /// Row-major `S × S`: `r_h(u, s, r) = hop(uπ, r → s) / π_s`.
    pub hop: Vec<f64>,
}

impl DensityRates {
    pub fn hop_at(&self, s: usize, r: usize) -> f64 {
        self.hop[s * self.birth.len() + r]
    }
}

pub fn density_rates<M: RateModel + ?Sized>(model: &M, u: &DensityField) -> DensityRates {
    let space = model.space();
    let s_count = space.len();
    let nu = u.to_measure(space);
    let birth = (0..s_count)
        .map(|s| model.birth(&nu, s, Scale::Limit) / space.weight(s))
        .collect();
    let death = (0..s_count)
        .map(|s| model.death(&nu, s, Scale::Limit))
        .collect();
    let mut hop = vec![0.0; s_count * s_count];
    for s in 0..s_count {
        for r in 0..s_count {
            if r != s {
                hop[s * s_count + r] = model.hop(&nu, r, s, Scale::Limit) / space.weight(s);
            }
        }
    }
    DensityRates { birth, death, hop }
}

/// Birth–death and hopping parts of `du/dt`, separately.
pub fn meanfield_rhs_parts<M: RateModel + ?Sized>(
    model: &M,
    u: &DensityField,
) -> (SignedSiteMeasure, SignedSiteMeasure) {
    let rates = density_rates(model, u);
    let w = model.space().weights();
    let u = u.values();
    let s_count = u.len();
    let bd = (0..s_count)
        .map(|s| rates.birth[s] - rates.death[s] * u[s])
        .collect();
    let hop = (0..s_count)
        .map(|s| {
            (0..s_count)
                .filter(|&r| r != s)
                .map(|r| (u[r] - u[s]) * rates.hop_at(s, r) * w[r])
                .sum()
        })
        .collect();
    (SignedSiteMeasure(bd), SignedSiteMeasure(hop))
}

/// `du_s/dt = r_b(u,s) − r_d(u,s)u_s + Σ_r (u_r − u_s) r_h(u,s,r) π_r`.
pub fn meanfield_rhs<M: RateModel + ?Sized>(model: &M, u: &DensityField) -> SignedSiteMeasure {
    let (bd, hop) = meanfield_rhs_parts(model, u);
    SignedSiteMeasure(bd.0.iter().zip(&hop.0).map(|(a, b)| a + b).collect())
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::measure::tv_norm;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(beta: f64, space: SiteSpace) -> ExampleModel {
        make_example_model(
            ExampleModelParams {
                psi_bd: ScalarFn::Constant { value: beta },
                psi_h: ScalarFn::Constant { value: 0.0 },
                competition: PairKernelSpec::UniformOffDiagonal { strength: 0.3 },
                hop_kernel: HopKernelSpec::Constant { value: 1.0 },
            },
            space,
        )
        .unwrap()
    }

    #[test]
    fn constant_psi_gives_constant_rates() {
        let space = SiteSpace::line(&[0.0, 1.0, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
        let m = constant(1.7, space.clone());
        let nu = [0.4, 0.0, 2.5];
        for s in 0..3 {
            assert_relative_eq!(m.birth(&nu, s, Scale::Finite(5)), 1.7 * space.weight(s));
            assert_eq!(m.death(&nu, s, Scale::Limit), 1.7);
        }
        assert!(m.is_configuration_independent());
    }

    #[test]
    fn empty_configuration_death_is_psi_at_zero() {
        let m = model(3);
        let beta0 = m.params().psi_bd.eval(0.0);
        for s in 0..3 {
            assert_eq!(m.death(&[0.0; 3], s, Scale::Finite(4)), beta0);
        }
    }

    #[test]
    fn reciprocal_death_rate() {
        let space = SiteSpace::line(&[0.0, 1.0, 2.0], vec![1.0, 1.0, 1.0]).unwrap();
        let m = make_example_model(
            ExampleModelParams {
                psi_bd: ScalarFn::Reciprocal {
                    scale: 1.0,
                    rate: 1.0,
                },
                psi_h: ScalarFn::Constant { value: 0.0 },
                competition: PairKernelSpec::UniformOffDiagonal { strength: 1.0 },
                hop_kernel: HopKernelSpec::Constant { value: 0.0 },
            },
            space,
        )
        .unwrap();
        // off-site mass seen from site 1 is 0.75 + 0.5; the on-site mass does not count
        let nu = [0.75, 3.0, 0.5];
        assert_relative_eq!(
            m.death(&nu, 1, Scale::Limit),
            1.0 / (1.0 + 1.25),
            epsilon = 1e-15
        );
    }

    #[test]
    fn rejects_self_interaction() {
        let mut params = sigmoid_params();
        params.competition = PairKernelSpec::Dense {
            values: vec![vec![0.1, 1.0], vec![1.0, 0.0]],
        };
        let space = SiteSpace::uniform_grid(2, 0.0, 1.0).unwrap();
        assert!(matches!(
            make_example_model(params, space),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn rejects_asymmetric_hop_kernel() {
        let mut params = sigmoid_params();
        let mut values = vec![vec![vec![1.0; 2]; 2]; 2];
        values[0][1][0] = 2.0;
        values[0][1][1] = 2.0;
        params.hop_kernel = HopKernelSpec::Dense { values };
        let space = SiteSpace::uniform_grid(2, 0.0, 1.0).unwrap();
        assert!(make_example_model(params, space).is_err());
    }

    #[test]
    fn detailed_balance_holds_for_example_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = model(3);
        for n in [1u32, 2, 8, 64] {
            let samples = random_configurations(m.space(), n, 100, 3 * n, &mut rng);
            let report = check_db_n(&m, &samples, n).unwrap();
            assert!(report.max_abs <= 1e-12, "n = {n}: {report:?}");
        }
        let corrected = model(3).with_finite_n_correction(0.5).unwrap();
        let samples = random_configurations(corrected.space(), 4, 50, 10, &mut rng);
        assert!(check_db_n(&corrected, &samples, 4).unwrap().max_abs <= 1e-12);
    }

    #[test]
    fn injected_birth_violation_is_detected() {
        let eps = 0.05;
        let m = Perturbed::birth_at(model(2), 1, eps).unwrap();
        let samples = vec![Configuration::new(3, vec![1, 2]).unwrap()];
        let report = check_db_n(&m, &samples, 3).unwrap();
        assert!(report.max_abs >= eps - 1e-15);
        assert_eq!(check_db_n(&m, &[], 3).unwrap(), DbReport::default());
    }

    #[test]
    fn density_rates_satisfy_limit_balance() {
        let m = model(3);
        let u = DensityField::new(vec![0.3, 1.7, 0.9]).unwrap();
        let r = density_rates(&m, &u);
        for s in 0..3 {
            assert_relative_eq!(r.birth[s], r.death[s], max_relative = 1e-15);
            for q in 0..3 {
                assert_relative_eq!(r.hop_at(s, q), r.hop_at(q, s), max_relative = 1e-14);
            }
        }
        // hand evaluation of the sigmoid response at site 0
        let space = m.space();
        let nu = u.to_measure(space);
        let z: f64 = (1..3)
            .map(|r| 1.2 * (-space.dist_sq(0, r) / (2.0 * 0.36)).exp() * nu[r])
            .sum();
        let expected = 0.4 + 1.2 / (1.0 + (2.0 * (z - 0.5)).exp());
        assert_relative_eq!(r.birth[0], expected, max_relative = 1e-14);
    }

    #[test]
    fn equilibrium_rates_for_constant_psi() {
        let space = SiteSpace::uniform_grid(3, 0.0, 1.0).unwrap();
        let m = constant(2.5, space);
        let r = density_rates(&m, &DensityField::constant(3, 1.0).unwrap());
        assert!(r.birth.iter().chain(&r.death).all(|&x| x == 2.5));
    }

    #[test]
    fn meanfield_rhs_vanishes_at_equilibrium() {
        let m = model(4);
        let rhs = meanfield_rhs(&m, &DensityField::constant(4, 1.0).unwrap());
        assert!(rhs.values().iter().all(|x| x.abs() <= 1e-12));
    }

    #[test]
    fn single_site_linear_rhs() {
        let space = SiteSpace::line(&[0.0], vec![0.7]).unwrap();
        let m = constant(1.3, space);
        let u = 2.2;
        let rhs = meanfield_rhs(&m, &DensityField::new(vec![u]).unwrap());
        assert_relative_eq!(rhs.values()[0], 1.3 - 1.3 * u, epsilon = 1e-15);
    }

    // Measure-form field V[ν] = b(ν) − d(ν)ν + ∫h(ν,y,·)ν(dy) − ν∫h(ν,·,dy),
    // evaluated with a double loop straight from the raw rates.
    fn velocity_oracle(m: &ExampleModel, nu: &[f64]) -> Vec<f64> {
        let s_count = nu.len();
        let mut v = vec![0.0; s_count];
        for s in 0..s_count {
            v[s] += m.birth(nu, s, Scale::Limit) - m.death(nu, s, Scale::Limit) * nu[s];
            for r in 0..s_count {
                v[s] +=
                    m.hop(nu, r, s, Scale::Limit) * nu[r] - nu[s] * m.hop(nu, s, r, Scale::Limit);
            }
        }
        v
    }

    #[test]
    fn meanfield_rhs_matches_velocity_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = model(3);
        for _ in 0..20 {
            let u =
                DensityField::new((0..3).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
            let rhs = meanfield_rhs(&m, &u);
            let oracle = velocity_oracle(&m, &u.to_measure(m.space()));
            for s in 0..3 {
                assert_relative_eq!(
                    rhs.values()[s] * m.space().weight(s),
                    oracle[s],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn hopping_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = model(5);
        for _ in 0..50 {
            let u =
                DensityField::new((0..5).map(|_| rng.random_range(0.0..4.0)).collect()).unwrap();
            let (_, hop) = meanfield_rhs_parts(&m, &u);
            let total: f64 = hop
                .values()
                .iter()
                .zip(m.space().weights())
                .map(|(h, w)| h * w)
                .sum();
            assert!(total.abs() <= 1e-12);
        }
    }

    #[test]
    fn velocity_field_has_local_lipschitz_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = model(3);
        let lip = m.velocity_lipschitz_bound();
        let w = m.space().weights().to_vec();
        for _ in 0..200 {
            let scale = rng.random_range(0.1..10.0);
            let u: Vec<f64> = (0..3).map(|_| scale * rng.random_range(0.0..2.0)).collect();
            let v: Vec<f64> = u
                .iter()
                .map(|x| (x + rng.random_range(-0.01..0.01f64)).max(0.0))
                .collect();
            let fu = meanfield_rhs(&m, &DensityField::new(u.clone()).unwrap());
            let fv = meanfield_rhs(&m, &DensityField::new(v.clone()).unwrap());
            let dv = tv_norm(&SignedSiteMeasure(
                (0..3)
                    .map(|s| (fu.values()[s] - fv.values()[s]) * w[s])
                    .collect(),
            ));
            let du: f64 = (0..3).map(|s| (u[s] - v[s]).abs() * w[s]).sum();
            let mu: f64 = (0..3).map(|s| u[s] * w[s]).sum();
            let mv: f64 = (0..3).map(|s| v[s] * w[s]).sum();
            assert!(dv <= lip * (1.0 + mu + mv) * du + 1e-14);
        }
    }

    #[test]
    fn bounds_dominate_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = model(3);
        let b = m.bounds();
        for c in random_configurations(m.space(), 4, 100, 30, &mut rng) {
            let nu = c.masses();
            let birth: f64 = (0..3).map(|s| m.birth(&nu, s, Scale::Finite(4))).sum();
            assert!(birth <= b.birth_total);
            for s in 0..3 {
                assert!(m.death(&nu, s, Scale::Finite(4)) <= b.death);
                let hop: f64 = (0..3).map(|r| m.hop(&nu, s, r, Scale::Finite(4))).sum();
                assert!(hop <= b.hop_total);
            }
        }
    }
}
