use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::measure::{tv_distance, SiteSpace};

/// Dense enumeration of the box `{0, …, K}^S`; site 0 varies fastest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpaceIndex {
    sites: usize,
    cap: u32,
    strides: Vec<usize>,
    len: usize,
}

impl StateSpaceIndex {
    pub fn new(sites: usize, cap: u32) -> Result<Self> {
        if sites == 0 || cap == 0 {
            return Err(invalid("state space needs sites >= 1 and K_max >= 1"));
        }
        let base = cap as usize + 1;
        let mut strides = Vec::with_capacity(sites);
        let mut len = 1usize;
        for _ in 0..sites {
            strides.push(len);
            len = len
                .checked_mul(base)
                .filter(|&l| l <= u32::MAX as usize)
                .ok_or_else(|| invalid(format!("(K_max+1)^S = {base}^{sites} is too large")))?;
        }
        Ok(Self {
            sites,
            cap,
            strides,
            len,
        })
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn stride(&self, site: usize) -> usize {
        self.strides[site]
    }

    /// `None` when the counts leave the box or have the wrong length.
    pub fn index_of(&self, counts: &[u32]) -> Option<usize> {
        if counts.len() != self.sites || counts.iter().any(|&k| k > self.cap) {
            return None;
        }
        Some(
            counts
                .iter()
                .zip(&self.strides)
                .map(|(&k, &st)| k as usize * st)
                .sum(),
        )
    }

    pub fn decode_into(&self, mut idx: usize, out: &mut [u32]) {
        let base = self.cap as usize + 1;
        for k in out.iter_mut() {
            *k = (idx % base) as u32;
            idx /= base;
        }
    }

    pub fn state(&self, idx: usize) -> Vec<u32> {
        let mut out = vec![0; self.sites];
        self.decode_into(idx, &mut out);
        out
    }
}

/// A probability vector on the truncated state space.
///
/// `deficit` is the probability known to lie outside the box, either from
/// truncating the initial law or from integrated boundary outflow.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterDistribution {
    index: StateSpaceIndex,
    probs: Vec<f64>,
    deficit: f64,
}

impl MasterDistribution {
    pub fn new(index: StateSpaceIndex, probs: Vec<f64>) -> Result<Self> {
        Self::with_deficit(index, probs, 0.0)
    }

    pub fn with_deficit(index: StateSpaceIndex, probs: Vec<f64>, deficit: f64) -> Result<Self> {
        if probs.len() != index.len() {
            return Err(invalid(format!(
                "{} probabilities for {} states",
                probs.len(),
                index.len()
            )));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite()) {
            return Err(invalid(format!("non-finite probability at state {i}")));
        }
        if let Some((i, &p)) = probs
            .iter()
            .enumerate()
            .find(|(_, &p)| p < crate::ode::NEGATIVITY_TOL)
        {
            return Err(Error::Negativity {
                time: f64::NAN,
                index: i,
                value: p,
            });
        }
        if !(deficit.is_finite() && deficit >= 0.0) {
            return Err(invalid("deficit must be finite and nonnegative"));
        }
        Ok(Self {
            index,
            probs,
            deficit,
        })
    }

    pub fn dirac(index: StateSpaceIndex, counts: &[u32]) -> Result<Self> {
        let i = index
            .index_of(counts)
            .ok_or_else(|| invalid(format!("state {counts:?} lies outside the truncated box")))?;
        let mut probs = vec![0.0; index.len()];
        probs[i] = 1.0;
        Self::new(index, probs)
    }

    pub fn index(&self) -> &StateSpaceIndex {
        &self.index
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn deficit(&self) -> f64 {
        self.deficit
    }

    pub fn prob(&self, counts: &[u32]) -> f64 {
        self.index.index_of(counts).map_or(0.0, |i| self.probs[i])
    }

    pub fn total(&self) -> f64 {
        pairwise_sum(&self.probs)
    }

    /// `Σ_k |P(k) − Q(k)|` over the box.
    pub fn tv_distance(&self, other: &MasterDistribution) -> Result<f64> {
        if self.index != other.index {
            return Err(invalid("distributions live on different state spaces"));
        }
        Ok(tv_distance(&self.probs, &other.probs))
    }

    /// `Σ_k P(k) f(k)`.
    pub fn expect(&self, mut f: impl FnMut(&[u32]) -> f64) -> f64 {
        let mut buf = vec![0; self.index.sites()];
        let terms: Vec<f64> = self
            .probs
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if p == 0.0 {
                    return 0.0;
                }
                self.index.decode_into(i, &mut buf);
                p * f(&buf)
            })
            .collect();
        pairwise_sum(&terms)
    }

    pub fn mean_counts(&self) -> Vec<f64> {
        (0..self.index.sites())
            .map(|s| self.expect(|k| f64::from(k[s])))
            .collect()
    }
}

/// Pairwise summation: fixed reduction order, `O(log n)` error growth.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Poisson(mean) probabilities of `0..=cap`.
pub fn poisson_pmf(mean: f64, cap: u32) -> Vec<f64> {
    let mut out = Vec::with_capacity(cap as usize + 1);
    if mean == 0.0 {
        out.push(1.0);
        out.resize(cap as usize + 1, 0.0);
        return out;
    }
    let ln_m = mean.ln();
    let mut log_p = -mean;
    out.push(log_p.exp());
    for k in 1..=cap {
        log_p += ln_m - f64::from(k).ln();
        out.push(log_p.exp());
    }
    out
}

/// `P(N > cap)` for `N ~ Poisson(mean)`, summed directly over the tail.
pub fn poisson_tail(mean: f64, cap: u32) -> f64 {
    if mean == 0.0 {
        return 0.0;
    }
    let ln_m = mean.ln();
    let mut log_p = -mean;
    for k in 1..=cap + 1 {
        log_p += ln_m - f64::from(k).ln();
    }
    let mut term = log_p.exp();
    let mut sum = 0.0;
    let mut k = f64::from(cap) + 1.0;
    // Terms decrease once k > mean; stop when they no longer register.
    loop {
        sum += term;
        k += 1.0;
        term *= mean / k;
        if k > mean && term <= sum * 1e-17 {
            break;
        }
        if !term.is_finite() || k > 1e7 {
            break;
        }
    }
    sum.min(1.0)
}

/// Product of independent `Poisson(means[s])` laws restricted to the box and
/// renormalized. The deficit is the untruncated mass outside the box.
pub fn product_poisson(index: &StateSpaceIndex, means: &[f64]) -> Result<MasterDistribution> {
    if means.len() != index.sites() {
        return Err(invalid("one Poisson mean per site is required"));
    }
    if means.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(invalid("Poisson means must be finite and nonnegative"));
    }
    let cap = index.cap();
    let marginals: Vec<Vec<f64>> = means
        .iter()
        .map(|&m| {
            let pmf = poisson_pmf(m, cap);
            let mass: f64 = pmf.iter().sum();
            pmf.into_iter().map(|p| p / mass).collect()
        })
        .collect();
    let inside: f64 = means.iter().map(|&m| 1.0 - poisson_tail(m, cap)).product();
    let mut buf = vec![0; index.sites()];
    let probs = (0..index.len())
        .map(|i| {
            index.decode_into(i, &mut buf);
            buf.iter()
                .zip(&marginals)
                .map(|(&k, pmf)| pmf[k as usize])
                .product()
        })
        .collect();
    MasterDistribution::with_deficit(index.clone(), probs, (1.0 - inside).max(0.0))
}

/// The scaled Poisson reference `Π^n`: independent `Poisson(n π_s)` counts.
///
/// Fails when the truncation deficit exceeds `tolerance`.
pub fn poisson_reference(
    n: u32,
    space: &SiteSpace,
    cap: u32,
    tolerance: f64,
) -> Result<MasterDistribution> {
    if n == 0 {
        return Err(invalid("n must be positive"));
    }
    let index = StateSpaceIndex::new(space.len(), cap)?;
    let means: Vec<f64> = space.weights().iter().map(|w| f64::from(n) * w).collect();
    let reference = product_poisson(&index, &means)?;
    if reference.deficit() > tolerance {
        return Err(Error::Truncation {
            deficit: reference.deficit(),
            tolerance,
        });
    }
    Ok(reference)
}

/// `∫‖ν‖ dP = (1/n) Σ_k P(k) |k|`.
pub fn first_moment_mass(p: &MasterDistribution, n: u32) -> f64 {
    let nf = f64::from(n);
    p.expect(|k| k.iter().map(|&c| f64::from(c)).sum::<f64>() / nf)
}

/// `(1/n) log ∫ e^{n‖ν‖} dP = (1/n) log Σ_k P(k) e^{|k|}`.
pub fn exp_moment_mass(p: &MasterDistribution, n: u32) -> f64 {
    let total: f64 = p.expect(|k| k.iter().map(|&c| f64::from(c)).sum::<f64>().exp());
    total.ln() / f64::from(n)
}
