//! The doubly nonlocal Fisher–KPP equation and its gradient structure.
//!
//! With `ν = uπ`, the measure-valued intensities are
//! `b_ν(s) = r_b π_s`, `d_ν(s) = r_d u_s π_s` and
//! `h_ν(s, r) = hop(ν, s → r)·u_s π_s`; the transport of `h_ν` swaps source
//! and target. The entropy force is `−log u_s` on births and deaths and
//! `log u_s − log u_r` on the hop `s → r`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ggf::{hellinger_sq, psi_star, upsilon};
use crate::measure::{entropy_vs_activity, DensityField, SignedSiteMeasure, SiteSpace};
use crate::ode::{DtPolicy, Integrator, OdeStats, Positivity};
use crate::rates::{density_rates, meanfield_rhs, RateModel, Scale};

/// Density threshold below which the chain rule is not evaluated.
pub const CHAIN_RULE_FLOOR: f64 = 1e-8;

/// Net fluxes `λ^bd` (per site) and `λ^h` (row-major `S × S`, source first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldFlux {
    pub bd: SignedSiteMeasure,
    pub hop: Vec<f64>,
}

impl MeanFieldFlux {
    pub fn zeros(sites: usize) -> Self {
        Self {
            bd: SignedSiteMeasure::zeros(sites),
            hop: vec![0.0; sites * sites],
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            bd: SignedSiteMeasure(self.bd.values().iter().map(|v| factor * v).collect()),
            hop: self.hop.iter().map(|v| factor * v).collect(),
        }
    }

    /// `(div λ^h)_s = Σ_r λ^h(r, s) − λ^h(s, r)`: net hop inflow into `s`.
    pub fn hop_divergence(&self) -> Vec<f64> {
        let s_count = self.bd.values().len();
        (0..s_count)
            .map(|s| {
                (0..s_count)
                    .map(|r| self.hop[r * s_count + s] - self.hop[s * s_count + r])
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intensities {
    pub birth: Vec<f64>,
    pub death: Vec<f64>,
    /// `h_ν(s, r)`, row-major, zero diagonal.
    pub hop: Vec<f64>,
}

pub fn intensities<M: RateModel + ?Sized>(model: &M, u: &DensityField) -> Intensities {
    let space = model.space();
    let s_count = space.len();
    let nu = u.to_measure(space);
    let rates = density_rates(model, u);
    let w = space.weights();
    let mut hop = vec![0.0; s_count * s_count];
    for s in 0..s_count {
        for r in 0..s_count {
            if r != s {
                hop[s * s_count + r] = model.hop(&nu, s, r, Scale::Limit) * nu[s];
            }
        }
    }
    Intensities {
        birth: (0..s_count).map(|s| rates.birth[s] * w[s]).collect(),
        death: (0..s_count).map(|s| rates.death[s] * nu[s]).collect(),
        hop,
    }
}

/// `λ^bd = b_ν − d_ν`, `λ^h = ½(h_ν − T_# h_ν)`.
pub fn optimal_flux<M: RateModel + ?Sized>(model: &M, u: &DensityField) -> MeanFieldFlux {
    let it = intensities(model, u);
    let s_count = it.birth.len();
    let mut hop = vec![0.0; s_count * s_count];
    for s in 0..s_count {
        for r in 0..s_count {
            hop[s * s_count + r] = 0.5 * (it.hop[s * s_count + r] - it.hop[r * s_count + s]);
        }
    }
    MeanFieldFlux {
        bd: SignedSiteMeasure(it.birth.iter().zip(&it.death).map(|(b, d)| b - d).collect()),
        hop,
    }
}

/// `ℰ(ν) = Ent(uπ | π)`.
pub fn meanfield_energy(u: &DensityField, space: &SiteSpace) -> f64 {
    entropy_vs_activity(u, space)
}

/// `𝒟(ν) = 2 Σ_s (√u_s − 1)² r_b π_s + Σ_{s,r} (√u_r − √u_s)² r_h(u,s,r) π_s π_r`.
pub fn meanfield_fisher<M: RateModel + ?Sized>(u: &DensityField, model: &M) -> f64 {
    let space = model.space();
    let w = space.weights();
    let rates = density_rates(model, u);
    let v = u.values();
    let s_count = v.len();
    let mut bd = 0.0;
    let mut hop = 0.0;
    for s in 0..s_count {
        let d = v[s].sqrt() - 1.0;
        bd += 2.0 * d * d * rates.birth[s] * w[s];
        for r in 0..s_count {
            if r != s {
                let d = v[r].sqrt() - v[s].sqrt();
                hop += d * d * rates.hop_at(s, r) * w[s] * w[r];
            }
        }
    }
    bd + hop
}

/// `4ℋ²(b_ν, d_ν) + 2ℋ²(h_ν, T_# h_ν)`, the definition the Hellinger form simplifies.
pub fn meanfield_fisher_hellinger<M: RateModel + ?Sized>(u: &DensityField, model: &M) -> f64 {
    let it = intensities(model, u);
    let s_count = it.birth.len();
    let transported: Vec<f64> = (0..s_count * s_count)
        .map(|e| it.hop[(e % s_count) * s_count + e / s_count])
        .collect();
    4.0 * hellinger_sq(&it.birth, &it.death) + 2.0 * hellinger_sq(&it.hop, &transported)
}

/// `𝓡*(ν, ζ)` at the entropy force; equal to [`meanfield_fisher`].
pub fn meanfield_dual_dissipation<M: RateModel + ?Sized>(u: &DensityField, model: &M) -> f64 {
    let it = intensities(model, u);
    let v = u.values();
    let s_count = v.len();
    let term = |a: f64, b: f64, zeta: f64| {
        if a > 0.0 && b > 0.0 {
            psi_star(zeta) * a.sqrt() * b.sqrt()
        } else {
            a + b
        }
    };
    let mut total = 0.0;
    for s in 0..s_count {
        total += 2.0 * term(it.birth[s], it.death[s], -v[s].ln());
        for r in 0..s_count {
            if r != s {
                total += term(
                    it.hop[s * s_count + r],
                    it.hop[r * s_count + s],
                    v[s].ln() - v[r].ln(),
                );
            }
        }
    }
    total
}

/// `𝓡(ν, λ) = 2 Σ Υ(λ^bd/2, b_ν, d_ν) + Σ_{s≠r} Υ(λ^h, h_ν, T_# h_ν)`.
pub fn meanfield_dissipation<M: RateModel + ?Sized>(
    u: &DensityField,
    flux: &MeanFieldFlux,
    model: &M,
) -> f64 {
    let it = intensities(model, u);
    let s_count = it.birth.len();
    let mut total = 0.0;
    for s in 0..s_count {
        total += 2.0 * upsilon(0.5 * flux.bd.values()[s], it.birth[s], it.death[s]);
        for r in 0..s_count {
            if r != s {
                total += upsilon(
                    flux.hop[s * s_count + r],
                    it.hop[s * s_count + r],
                    it.hop[r * s_count + s],
                );
            }
        }
    }
    total
}

/// `⟨λ, −∇̄ℰ'⟩ = −Σ λ^bd_s log u_s + Σ λ^h(s,r)(log u_s − log u_r)`.
pub fn meanfield_pairing(u: &DensityField, flux: &MeanFieldFlux) -> f64 {
    let v = u.values();
    let s_count = v.len();
    let mut total = 0.0;
    for s in 0..s_count {
        total -= flux.bd.values()[s] * v[s].ln();
        for r in 0..s_count {
            if r != s {
                total += flux.hop[s * s_count + r] * (v[s].ln() - v[r].ln());
            }
        }
    }
    total
}

#[derive(Debug, Clone)]
pub struct MeanFieldPath {
    pub times: Vec<f64>,
    pub states: Vec<DensityField>,
    pub fluxes: Option<Vec<MeanFieldFlux>>,
    pub stats: OdeStats,
}

impl MeanFieldPath {
    /// A path with the same states and fluxes replaced.
    pub fn with_fluxes(&self, fluxes: Vec<MeanFieldFlux>) -> Result<Self> {
        if fluxes.len() != self.states.len() {
            return Err(invalid("one flux per path point is required"));
        }
        Ok(Self {
            fluxes: Some(fluxes),
            ..self.clone()
        })
    }
}

/// Integrates the mean-field equation, recording `u` and the optimal fluxes at
/// each of `times`. Steps that push a density below `−1e-12` are rejected and
/// retried with half the step.
pub fn integrate_meanfield<M: RateModel + ?Sized>(
    u0: &DensityField,
    model: &M,
    times: &[f64],
    policy: DtPolicy,
) -> Result<MeanFieldPath> {
    let space = model.space();
    if u0.len() != space.len() {
        return Err(invalid("initial density has the wrong number of sites"));
    }
    let b = model.bounds();
    let rate_scale = b.death
        + b.hop_total
        + b.birth_total
            / space
                .weights()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
    let mut failure: Option<Error> = None;
    let sol = Integrator::new(policy, Positivity::Reject).solve(
        |t, y, dy| {
            // Trial stages may dip below zero before the step is rejected.
            let clamped: Vec<f64> = y.iter().map(|x| x.max(0.0)).collect();
            match DensityField::new(clamped) {
                Ok(u) => dy.copy_from_slice(meanfield_rhs(model, &u).values()),
                Err(_) => {
                    failure.get_or_insert(Error::NonFinite { time: t });
                    dy.fill(f64::NAN);
                }
            }
        },
        u0.values().to_vec(),
        times,
        rate_scale,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let sol = sol?;
    let states = sol
        .states
        .into_iter()
        .map(|y| DensityField::new(y.into_iter().map(|x| x.max(0.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let fluxes = states.iter().map(|u| optimal_flux(model, u)).collect();
    Ok(MeanFieldPath {
        times: sol.times,
        states,
        fluxes: Some(fluxes),
        stats: sol.stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldRow {
    pub t: f64,
    pub energy: f64,
    pub fisher: f64,
    pub dissipation: f64,
    pub edb_partial: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldEdb {
    pub residual: f64,
    pub rows: Vec<MeanFieldRow>,
}

/// `𝓘([0,T]) = ∫ 𝓡(ν, λ) + 𝒟(ν) dt + ℰ(ν_T) − ℰ(ν_0)` by the trapezoid rule
/// on the path's grid. Paths without fluxes use the optimal ones.
pub fn edb_residual_mf<M: RateModel + ?Sized>(
    path: &MeanFieldPath,
    model: &M,
) -> Result<MeanFieldEdb> {
    if path.states.is_empty() {
        return Err(invalid("path has no points"));
    }
    let space = model.space();
    let mut rows = Vec::with_capacity(path.states.len());
    let mut integral = 0.0;
    let e0 = meanfield_energy(&path.states[0], space);
    let mut prev: Option<(f64, f64)> = None;
    for (i, (t, u)) in path.times.iter().zip(&path.states).enumerate() {
        let flux = match &path.fluxes {
            Some(f) => f[i].clone(),
            None => optimal_flux(model, u),
        };
        let energy = meanfield_energy(u, space);
        let fisher = meanfield_fisher(u, model);
        let dissipation = meanfield_dissipation(u, &flux, model);
        let integrand = fisher + dissipation;
        if !integrand.is_finite() {
            return Err(Error::AbsoluteContinuity(format!(
                "infinite dissipation at t = {t}"
            )));
        }
        if let Some((tp, fp)) = prev {
            integral += 0.5 * (t - tp) * (integrand + fp);
        }
        prev = Some((*t, integrand));
        rows.push(MeanFieldRow {
            t: *t,
            energy,
            fisher,
            dissipation,
            edb_partial: integral + energy - e0,
        });
    }
    Ok(MeanFieldEdb {
        residual: rows.last().map_or(0.0, |r| r.edb_partial),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainRuleReport {
    pub max_deviation: f64,
    pub checked: usize,
    /// Interior times skipped because some density fell below the floor.
    pub skipped: usize,
}

/// Compares the central difference of `ℰ(ν_t)` with
/// `Σ_s log u_s (λ^bd_s + (div λ^h)_s)` at interior grid times.
pub fn chain_rule_check<M: RateModel + ?Sized>(
    path: &MeanFieldPath,
    model: &M,
) -> Result<ChainRuleReport> {
    let space = model.space();
    let m = path.states.len();
    let mut report = ChainRuleReport {
        max_deviation: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 1..m.saturating_sub(1) {
        let u = &path.states[i];
        if u.min() < CHAIN_RULE_FLOOR {
            report.skipped += 1;
            continue;
        }
        let dt = path.times[i + 1] - path.times[i - 1];
        if dt <= 0.0 {
            return Err(invalid("path times must be strictly increasing"));
        }
        let lhs = (meanfield_energy(&path.states[i + 1], space)
            - meanfield_energy(&path.states[i - 1], space))
            / dt;
        let flux = match &path.fluxes {
            Some(f) => f[i].clone(),
            None => optimal_flux(model, u),
        };
        let div = flux.hop_divergence();
        let rhs: f64 = u
            .values()
            .iter()
            .enumerate()
            .map(|(s, v)| v.ln() * (flux.bd.values()[s] + div[s]))
            .sum();
        report.max_deviation = report.max_deviation.max((lhs - rhs).abs());
        report.checked += 1;
    }
    Ok(report)
}

/// Writes `t,u_1..u_S,energy,fisher,edb_partial`.
pub fn write_meanfield_csv<W: Write>(
    path: &MeanFieldPath,
    edb: &MeanFieldEdb,
    mut w: W,
) -> std::io::Result<()> {
    let s_count = path.states.first().map_or(0, |u| u.len());
    let mut header = String::from("t");
    for s in 1..=s_count {
        header.push_str(&format!(",u_{s}"));
    }
    header.push_str(",energy,fisher,edb_partial");
    writeln!(w, "{header}")?;
    for ((t, u), row) in path.times.iter().zip(&path.states).zip(&edb.rows) {
        write!(w, "{t}")?;
        for v in u.values() {
            write!(w, ",{v:e}")?;
        }
        writeln!(
            w,
            ",{:e},{:e},{:e}",
            row.energy, row.fisher, row.edb_partial
        )?;
    }
    Ok(())
}
