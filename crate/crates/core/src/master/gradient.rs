//! Energy, fluxes, dissipation potentials and the energy–dissipation balance
//! of the master equation.
//!
//! On an edge `k → k'` with forward rate `q` and backward rate `q'`, the
//! intensities are `a = q P(k) / n` and `b = q' P(k') / n`, and the force is
//! `ζ = log U(k) − log U(k')` with `U = P / Π`. Birth–death edges are visited
//! once (from the birth side), hop edges once per orientation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::distribution::{pairwise_sum, product_poisson, MasterDistribution};
use super::generator::{GeneratorMatrix, Move};
use crate::error::{invalid, Error, Result};
use crate::ggf::{psi_star, upsilon};
use crate::measure::{phi, DensityField, SiteSpace};

/// Lower clamp for `U` inside force diagnostics.
const U_FLOOR: f64 = 1e-300;

fn same_space(a: &MasterDistribution, g: &GeneratorMatrix) -> Result<()> {
    if a.index() != g.index() {
        return Err(invalid(
            "distribution and generator live on different state spaces",
        ));
    }
    Ok(())
}

/// `E_n(P) = (1/n) Σ_k Π(k) φ(P(k)/Π(k))`.
///
/// Equals `(1/n) KL(P‖Π)` when both are normalized; `+∞` when `P` charges a
/// state where `Π` vanishes.
pub fn scaled_entropy(
    p: &MasterDistribution,
    reference: &MasterDistribution,
    n: u32,
) -> Result<f64> {
    if p.index() != reference.index() {
        return Err(invalid(
            "distribution and reference live on different state spaces",
        ));
    }
    let mut terms = Vec::with_capacity(p.probs().len());
    for (&pk, &rk) in p.probs().iter().zip(reference.probs()) {
        let pk = pk.max(0.0);
        if rk == 0.0 {
            if pk > 0.0 {
                return Ok(f64::INFINITY);
            }
            continue;
        }
        terms.push(if pk == 0.0 { rk } else { rk * phi(pk / rk) });
    }
    Ok(pairwise_sum(&terms) / f64::from(n))
}

/// Net fluxes on the edges of the truncated chain, aligned with the
/// generator's slots. Birth slots carry `J^bd = ϑ^b − T_#ϑ^d`, hop slots carry
/// `J^h = ½(ϑ^h − T_#ϑ^h)`; death slots are unused and hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterFlux {
    values: Vec<f64>,
    slots: usize,
}

impl MasterFlux {
    pub fn zeros(gen: &GeneratorMatrix) -> Self {
        Self {
            values: vec![0.0; gen.index().len() * gen.slots()],
            slots: gen.slots(),
        }
    }

    /// The flux that solves the continuity equation for `P`.
    pub fn optimal(p: &MasterDistribution, gen: &GeneratorMatrix) -> Result<Self> {
        same_space(p, gen)?;
        let mut flux = Self::zeros(gen);
        for_each_edge(gen, |i, slot, j, mv| {
            let (a, b) = intensities(gen, p.probs(), i, slot, j);
            flux.values[i * gen.slots() + slot] = match mv {
                Move::Birth(_) => a - b,
                _ => 0.5 * (a - b),
            };
        });
        Ok(flux)
    }

    pub fn get(&self, state: usize, slot: usize) -> f64 {
        self.values[state * self.slots + slot]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| factor * v).collect(),
            slots: self.slots,
        }
    }

    /// `dP/dt` implied by the fluxes, without the boundary outflow term.
    ///
    /// A birth–death edge moves probability at rate `n·J^bd`, a hop pair at
    /// rate `2n·J^h` from each side.
    pub fn divergence(&self, gen: &GeneratorMatrix) -> Vec<f64> {
        let nf = f64::from(gen.n());
        let mut out = vec![0.0; gen.index().len()];
        for_each_edge(gen, |i, slot, j, mv| {
            let v = self.get(i, slot);
            match mv {
                Move::Birth(_) => {
                    out[i] -= nf * v;
                    out[j] += nf * v;
                }
                _ => out[i] -= 2.0 * nf * v,
            }
        });
        out
    }
}

/// Visits every in-box birth and hop edge in slot order.
fn for_each_edge(gen: &GeneratorMatrix, mut f: impl FnMut(usize, usize, usize, Move)) {
    for i in 0..gen.index().len() {
        for slot in 0..gen.slots() {
            let mv = gen.slot_move(slot);
            if matches!(mv, Move::Death(_)) {
                continue;
            }
            if let Some((j, _)) = gen.edge(i, slot) {
                f(i, slot, j, mv);
            }
        }
    }
}

fn intensities(gen: &GeneratorMatrix, p: &[f64], i: usize, slot: usize, j: usize) -> (f64, f64) {
    let nf = f64::from(gen.n());
    let forward = gen.slot_rate(i, slot) / nf;
    let backward = gen.slot_rate(j, gen.reverse_slot(slot)) / nf;
    (forward * p[i].max(0.0), backward * p[j].max(0.0))
}

/// Birth–death and hopping parts of a potential.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FisherInfo {
    pub bd: f64,
    pub hop: f64,
}

impl FisherInfo {
    pub fn total(&self) -> f64 {
        self.bd + self.hop
    }
}

/// Fisher information in Hellinger form:
/// `D_bd = 2 Σ (√U(k+e_s) − √U(k))² b_s(k) Π(k)` and
/// `D_h = Σ (√U(k') − √U(k))² h_{s→r}(k) (k_s/n) Π(k)`.
pub fn fisher_information_n(
    p: &MasterDistribution,
    gen: &GeneratorMatrix,
    reference: &MasterDistribution,
) -> Result<FisherInfo> {
    same_space(p, gen)?;
    same_space(reference, gen)?;
    let pi = reference.probs();
    let probs = p.probs();
    if probs.iter().zip(pi).any(|(&pk, &rk)| pk > 0.0 && rk == 0.0) {
        return Ok(FisherInfo {
            bd: f64::INFINITY,
            hop: f64::INFINITY,
        });
    }
    let sqrt_u = |k: usize| {
        if pi[k] == 0.0 {
            0.0
        } else {
            (probs[k].max(0.0) / pi[k]).sqrt()
        }
    };
    let nf = f64::from(gen.n());
    let (mut bd, mut hop) = (Vec::new(), Vec::new());
    for_each_edge(gen, |i, slot, j, mv| {
        let d = sqrt_u(j) - sqrt_u(i);
        let w = gen.slot_rate(i, slot) / nf * pi[i];
        match mv {
            Move::Birth(_) => bd.push(2.0 * d * d * w),
            _ => hop.push(d * d * w),
        }
    });
    Ok(FisherInfo {
        bd: pairwise_sum(&bd),
        hop: pairwise_sum(&hop),
    })
}

/// Dual dissipation `R*_n(P, ζ)` at the entropy force `ζ = −∇̄ log U`:
/// `2 Σ ψ*(ζ)√(ab)` over birth–death edges and `Σ ψ*(ζ)√(ab)` over hops.
///
/// Where `ab = 0` the limit of `ψ*(ζ)√(ab)` as the clamped force diverges,
/// namely `a + b`, is used.
pub fn dual_dissipation_n(
    p: &MasterDistribution,
    gen: &GeneratorMatrix,
    reference: &MasterDistribution,
) -> Result<FisherInfo> {
    same_space(p, gen)?;
    same_space(reference, gen)?;
    let pi = reference.probs();
    let probs = p.probs();
    let log_u = |k: usize| (probs[k].max(0.0) / pi[k]).max(U_FLOOR).ln();
    let (mut bd, mut hop) = (Vec::new(), Vec::new());
    for_each_edge(gen, |i, slot, j, mv| {
        let (a, b) = intensities(gen, probs, i, slot, j);
        let term = if a > 0.0 && b > 0.0 {
            psi_star(log_u(i) - log_u(j)) * a.sqrt() * b.sqrt()
        } else {
            a + b
        };
        match mv {
            Move::Birth(_) => bd.push(2.0 * term),
            _ => hop.push(term),
        }
    });
    Ok(FisherInfo {
        bd: pairwise_sum(&bd),
        hop: pairwise_sum(&hop),
    })
}

/// `R_n(P, J) = 2 Σ Υ(J/2, a, b) + Σ Υ(J, a, b)`; `+∞` when a flux sits on
/// an edge with vanishing geometric mean.
pub fn dissipation_n(
    p: &MasterDistribution,
    flux: &MasterFlux,
    gen: &GeneratorMatrix,
) -> Result<FisherInfo> {
    same_space(p, gen)?;
    let (mut bd, mut hop) = (Vec::new(), Vec::new());
    for_each_edge(gen, |i, slot, j, mv| {
        let (a, b) = intensities(gen, p.probs(), i, slot, j);
        let w = flux.get(i, slot);
        match mv {
            Move::Birth(_) => bd.push(2.0 * upsilon(0.5 * w, a, b)),
            _ => hop.push(upsilon(w, a, b)),
        }
    });
    Ok(FisherInfo {
        bd: pairwise_sum(&bd),
        hop: pairwise_sum(&hop),
    })
}

/// `⟨J, ζ⟩` with `ζ = log U(k) − log U(k')`, `U` clamped below at `1e-300`.
pub fn pairing_n(
    p: &MasterDistribution,
    flux: &MasterFlux,
    gen: &GeneratorMatrix,
    reference: &MasterDistribution,
) -> Result<f64> {
    same_space(p, gen)?;
    same_space(reference, gen)?;
    let pi = reference.probs();
    let probs = p.probs();
    let log_u = |k: usize| (probs[k].max(0.0) / pi[k]).max(U_FLOOR).ln();
    let mut terms = Vec::new();
    for_each_edge(gen, |i, slot, j, _| {
        let w = flux.get(i, slot);
        if w != 0.0 {
            terms.push(w * (log_u(i) - log_u(j)));
        }
    });
    Ok(pairwise_sum(&terms))
}

/// One point of a path in `(P, J)` space.
#[derive(Debug, Clone)]
pub struct PathPoint {
    pub time: f64,
    pub dist: MasterDistribution,
    pub flux: MasterFlux,
}

impl PathPoint {
    pub fn optimal(time: f64, dist: MasterDistribution, gen: &GeneratorMatrix) -> Result<Self> {
        let flux = MasterFlux::optimal(&dist, gen)?;
        Ok(Self { time, dist, flux })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdbRow {
    pub t: f64,
    pub entropy: f64,
    pub fisher_bd: f64,
    pub fisher_h: f64,
    pub dissipation: f64,
    /// `𝓘_n([0, t])` by the trapezoid rule up to this row.
    pub edb_partial: f64,
    pub deficit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdbReport {
    pub residual: f64,
    pub initial_entropy: f64,
    pub rows: Vec<EdbRow>,
}

/// `𝓘_n([0,T]) = ∫ R_n(P, J) + D_n(P) dt + E_n(P_T) − E_n(P_0)`, trapezoid
/// rule on the path's own time grid.
///
/// Fails with [`Error::AbsoluteContinuity`] when any integrand is infinite.
pub fn edb_residual_n(
    path: &[PathPoint],
    gen: &GeneratorMatrix,
    reference: &MasterDistribution,
) -> Result<EdbReport> {
    if path.is_empty() {
        return Err(invalid("path has no points"));
    }
    if path.windows(2).any(|w| w[1].time < w[0].time) {
        return Err(invalid("path times must be nondecreasing"));
    }
    let n = gen.n();
    let mut rows = Vec::with_capacity(path.len());
    let mut integral = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    let mut e0 = 0.0;
    for point in path {
        let entropy = scaled_entropy(&point.dist, reference, n)?;
        let fisher = fisher_information_n(&point.dist, gen, reference)?;
        let dissipation = dissipation_n(&point.dist, &point.flux, gen)?.total();
        let integrand = dissipation + fisher.total();
        if !integrand.is_finite() || !entropy.is_finite() {
            return Err(Error::AbsoluteContinuity(format!(
                "infinite dissipation or entropy at t = {}",
                point.time
            )));
        }
        if let Some((t_prev, f_prev)) = prev {
            integral += 0.5 * (point.time - t_prev) * (integrand + f_prev);
        } else {
            e0 = entropy;
        }
        prev = Some((point.time, integrand));
        rows.push(EdbRow {
            t: point.time,
            entropy,
            fisher_bd: fisher.bd,
            fisher_h: fisher.hop,
            dissipation,
            edb_partial: integral + entropy - e0,
            deficit: point.dist.deficit(),
        });
    }
    Ok(EdbReport {
        residual: rows.last().map_or(0.0, |r| r.edb_partial),
        initial_entropy: e0,
        rows,
    })
}

pub fn write_diagnostics_csv<W: Write>(report: &EdbReport, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "t,entropy,fisher_bd,fisher_h,dissipation,edb_partial,deficit"
    )?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.t, r.entropy, r.fisher_bd, r.fisher_h, r.dissipation, r.edb_partial, r.deficit
        )?;
    }
    Ok(())
}

/// `(1/n) Ent(P | Π^n_ν)` for the product-Poisson law with means `n u_s π_s`.
pub fn poc_entropy(
    p: &MasterDistribution,
    target: &DensityField,
    space: &SiteSpace,
    n: u32,
    tolerance: f64,
) -> Result<f64> {
    if target.len() != space.len() || space.len() != p.index().sites() {
        return Err(invalid(
            "target, space and distribution disagree on the number of sites",
        ));
    }
    let means: Vec<f64> = target
        .to_measure(space)
        .iter()
        .map(|m| f64::from(n) * m)
        .collect();
    let reference = product_poisson(p.index(), &means)?;
    if reference.deficit() > tolerance {
        return Err(Error::Truncation {
            deficit: reference.deficit(),
            tolerance,
        });
    }
    scaled_entropy(p, &reference, n)
}

/// `∫‖ν − ν*‖_TV dP(ν)` for per-site target masses `ν*`.
pub fn expected_tv_distance(p: &MasterDistribution, target: &[f64], n: u32) -> Result<f64> {
    if target.len() != p.index().sites() {
        return Err(invalid("target has the wrong number of sites"));
    }
    let nf = f64::from(n);
    Ok(p.expect(|k| {
        k.iter()
            .zip(target)
            .map(|(&c, t)| (f64::from(c) / nf - t).abs())
            .sum()
    }))
}

/// Expected TV displacement rate `Σ_k P(k) Σ_moves rate·|jump| / n`, clipped
/// moves included. Births and deaths move `1/n` of mass, hops `2/n`.
pub fn jump_activity(p: &MasterDistribution, gen: &GeneratorMatrix) -> Result<f64> {
    same_space(p, gen)?;
    let nf = f64::from(gen.n());
    let terms: Vec<f64> = p
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &pk)| {
            let mut r = 0.0;
            for slot in 0..gen.slots() {
                let w = if matches!(gen.slot_move(slot), Move::Hop(..)) {
                    2.0
                } else {
                    1.0
                };
                r += w * gen.slot_rate(i, slot);
            }
            pk.max(0.0) * r / nf
        })
        .collect();
    Ok(pairwise_sum(&terms))
}
