use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distribution::{MasterDistribution, StateSpaceIndex};
use crate::error::{invalid, Error, Result};
use crate::ode::{DtPolicy, Integrator, OdeStats, Positivity};
use crate::rates::{RateModel, Scale};

const NONE: u32 = u32::MAX;
const PAR_THRESHOLD: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Move {
    Birth(usize),
    Death(usize),
    Hop(usize, usize),
}

/// Transition rates of the truncated chain.
///
/// Every state owns `S² + S` edge slots: births `0..S`, deaths `S..2S`, then
/// hops `(s, r)` for `r ≠ s` in lexicographic order. A slot stores its rate
/// even when the move is clipped at the boundary; clipped slots have no
/// target and their rate drains into the outflow.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    index: StateSpaceIndex,
    n: u32,
    slots: usize,
    target: Vec<u32>,
    rate: Vec<f64>,
    exit: Vec<f64>,
    clipped: Vec<f64>,
    in_ptr: Vec<usize>,
    in_src: Vec<u32>,
    in_rate: Vec<f64>,
}

impl GeneratorMatrix {
    pub fn index(&self) -> &StateSpaceIndex {
        &self.index
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn slot_move(&self, slot: usize) -> Move {
        let s_count = self.index.sites();
        if slot < s_count {
            Move::Birth(slot)
        } else if slot < 2 * s_count {
            Move::Death(slot - s_count)
        } else {
            let h = slot - 2 * s_count;
            let from = h / (s_count - 1);
            let r = h % (s_count - 1);
            Move::Hop(from, if r < from { r } else { r + 1 })
        }
    }

    pub fn slot_of(&self, mv: Move) -> usize {
        let s_count = self.index.sites();
        match mv {
            Move::Birth(s) => s,
            Move::Death(s) => s_count + s,
            Move::Hop(s, r) => {
                debug_assert_ne!(s, r);
                2 * s_count + s * (s_count - 1) + if r < s { r } else { r - 1 }
            }
        }
    }

    /// The slot at the target state that undoes `slot`.
    pub fn reverse_slot(&self, slot: usize) -> usize {
        match self.slot_move(slot) {
            Move::Birth(s) => self.slot_of(Move::Death(s)),
            Move::Death(s) => self.slot_of(Move::Birth(s)),
            Move::Hop(s, r) => self.slot_of(Move::Hop(r, s)),
        }
    }

    /// `(target, rate)` of an in-box transition, `None` if absent or clipped.
    pub fn edge(&self, state: usize, slot: usize) -> Option<(usize, f64)> {
        let e = state * self.slots + slot;
        (self.target[e] != NONE).then(|| (self.target[e] as usize, self.rate[e]))
    }

    /// Rate of a slot, including clipped moves.
    pub fn slot_rate(&self, state: usize, slot: usize) -> f64 {
        self.rate[state * self.slots + slot]
    }

    pub fn exit_rate(&self, state: usize) -> f64 {
        self.exit[state]
    }

    pub fn clipped_rate(&self, state: usize) -> f64 {
        self.clipped[state]
    }

    pub fn max_exit_rate(&self) -> f64 {
        self.exit.iter().fold(0.0, |m, &x| m.max(x))
    }

    /// `dp = Gᵀp`; returns the boundary outflow rate `Σ_k p(k)·clipped(k)`.
    pub fn apply_transpose(&self, p: &[f64], dp: &mut [f64]) -> f64 {
        let row = |j: usize| {
            let mut acc = -self.exit[j] * p[j];
            for e in self.in_ptr[j]..self.in_ptr[j + 1] {
                acc += self.in_rate[e] * p[self.in_src[e] as usize];
            }
            acc
        };
        if p.len() >= PAR_THRESHOLD {
            dp.par_iter_mut().enumerate().for_each(|(j, d)| *d = row(j));
        } else {
            for (j, d) in dp.iter_mut().enumerate() {
                *d = row(j);
            }
        }
        p.iter().zip(&self.clipped).map(|(a, b)| a * b).sum()
    }

    /// Matrix Market coordinate export of the full generator, row = source.
    pub fn write_coo<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let len = self.index.len();
        let mut entries = Vec::new();
        for i in 0..len {
            let mut row: Vec<(usize, f64)> = vec![(i, -self.exit[i])];
            for slot in 0..self.slots {
                if let Some((j, rate)) = self.edge(i, slot) {
                    if rate != 0.0 {
                        row.push((j, rate));
                    }
                }
            }
            row.sort_by_key(|&(j, _)| j);
            entries.extend(row.into_iter().map(|(j, v)| (i, j, v)));
        }
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(
            w,
            "% n={} sites={} cap={}; diagonal includes clipped boundary outflow",
            self.n,
            self.index.sites(),
            self.index.cap()
        )?;
        writeln!(w, "{len} {len} {}", entries.len())?;
        for (i, j, v) in entries {
            writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
        }
        Ok(())
    }
}

/// Builds the generator of the scaled process on the box:
/// birth at rate `n·b_s(ν)`, death at `d(ν, s)·k_s`, hop at `h_{s→r}(ν)·k_s`.
pub fn build_generator<M: RateModel + ?Sized>(
    model: &M,
    n: u32,
    index: &StateSpaceIndex,
) -> Result<GeneratorMatrix> {
    let s_count = index.sites();
    if model.space().len() != s_count {
        return Err(invalid(
            "model and state space disagree on the number of sites",
        ));
    }
    if n == 0 {
        return Err(invalid("n must be positive"));
    }
    let slots = s_count * s_count + s_count;
    let nf = f64::from(n);
    let scale = Scale::Finite(n);
    let cap = index.cap();
    let rows: Vec<(Vec<u32>, Vec<f64>)> = (0..index.len())
        .into_par_iter()
        .map(|i| {
            let k = index.state(i);
            let nu: Vec<f64> = k.iter().map(|&c| f64::from(c) / nf).collect();
            let mut target = vec![NONE; slots];
            let mut rate = vec![0.0; slots];
            for s in 0..s_count {
                rate[s] = nf * model.birth(&nu, s, scale);
                if k[s] < cap {
                    target[s] = (i + index.stride(s)) as u32;
                }
                if k[s] > 0 {
                    let ks = f64::from(k[s]);
                    rate[s_count + s] = model.death(&nu, s, scale) * ks;
                    target[s_count + s] = (i - index.stride(s)) as u32;
                    let mut slot = 2 * s_count + s * (s_count - 1);
                    for r in (0..s_count).filter(|&r| r != s) {
                        rate[slot] = model.hop(&nu, s, r, scale) * ks;
                        if k[r] < cap {
                            target[slot] = (i - index.stride(s) + index.stride(r)) as u32;
                        }
                        slot += 1;
                    }
                }
            }
            (target, rate)
        })
        .collect();
    let len = index.len();
    let mut target = Vec::with_capacity(len * slots);
    let mut rate = Vec::with_capacity(len * slots);
    for (t, r) in rows {
        target.extend(t);
        rate.extend(r);
    }
    if let Some(e) = rate.iter().position(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(invalid(format!(
            "rate {} at state {} is not a finite nonnegative number",
            rate[e],
            e / slots
        )));
    }
    let mut exit = vec![0.0; len];
    let mut clipped = vec![0.0; len];
    let mut in_count = vec![0usize; len + 1];
    for i in 0..len {
        for slot in 0..slots {
            let e = i * slots + slot;
            exit[i] += rate[e];
            if target[e] == NONE {
                clipped[i] += rate[e];
            } else {
                in_count[target[e] as usize + 1] += 1;
            }
        }
    }
    for j in 0..len {
        in_count[j + 1] += in_count[j];
    }
    let in_ptr = in_count;
    let mut fill = in_ptr.clone();
    let mut in_src = vec![0u32; in_ptr[len]];
    let mut in_rate = vec![0.0; in_ptr[len]];
    for i in 0..len {
        for slot in 0..slots {
            let e = i * slots + slot;
            if target[e] != NONE {
                let j = target[e] as usize;
                in_src[fill[j]] = i as u32;
                in_rate[fill[j]] = rate[e];
                fill[j] += 1;
            }
        }
    }
    Ok(GeneratorMatrix {
        index: index.clone(),
        n,
        slots,
        target,
        rate,
        exit,
        clipped,
        in_ptr,
        in_src,
        in_rate,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReversibilityReport {
    pub max_abs: f64,
    pub max_rel: f64,
}

/// Largest `|Π(k) q(k→k') − Π(k') q(k'→k)|` over in-box edges.
pub fn check_reversibility(
    gen: &GeneratorMatrix,
    reference: &MasterDistribution,
) -> Result<ReversibilityReport> {
    if reference.index() != gen.index() {
        return Err(invalid("reference lives on a different state space"));
    }
    let pi = reference.probs();
    let mut report = ReversibilityReport::default();
    for i in 0..gen.index().len() {
        for slot in 0..gen.slots() {
            let Some((j, rate)) = gen.edge(i, slot) else {
                continue;
            };
            let back = gen.slot_rate(j, gen.reverse_slot(slot));
            let lhs = pi[i] * rate;
            let rhs = pi[j] * back;
            let abs = (lhs - rhs).abs();
            let scale = lhs.abs().max(rhs.abs());
            report.max_abs = report.max_abs.max(abs);
            if scale > 0.0 {
                report.max_rel = report.max_rel.max(abs / scale);
            }
        }
    }
    Ok(report)
}

/// `max |(GᵀΠ)(k)|` over states without clipped moves.
pub fn stationarity_residual(gen: &GeneratorMatrix, reference: &MasterDistribution) -> f64 {
    let mut dp = vec![0.0; reference.probs().len()];
    gen.apply_transpose(reference.probs(), &mut dp);
    dp.iter()
        .enumerate()
        .filter(|&(i, _)| gen.clipped_rate(i) == 0.0)
        .fold(0.0, |m, (_, x)| m.max(x.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FkeOptions {
    /// Abort once the integrated boundary outflow exceeds this mass.
    pub outflow_tolerance: f64,
}

impl Default for FkeOptions {
    fn default() -> Self {
        Self {
            outflow_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FkePath {
    pub times: Vec<f64>,
    pub dists: Vec<MasterDistribution>,
    /// Integrated boundary outflow up to each time.
    pub outflow: Vec<f64>,
    pub stats: OdeStats,
}

/// Integrates `dP/dt = GᵀP` and records `P` at each of `times`.
pub fn integrate_fke(
    p0: &MasterDistribution,
    gen: &GeneratorMatrix,
    times: &[f64],
    policy: DtPolicy,
    opts: FkeOptions,
) -> Result<FkePath> {
    if p0.index() != gen.index() {
        return Err(invalid("initial law lives on a different state space"));
    }
    let len = gen.index().len();
    let mut y0 = p0.probs().to_vec();
    y0.push(0.0);
    let sol = Integrator::new(policy, Positivity::Abort)
        .checked_prefix(len)
        .solve(
            |_t, y, dy| {
                let out = gen.apply_transpose(&y[..len], &mut dy[..len]);
                dy[len] = out;
            },
            y0,
            times,
            gen.max_exit_rate(),
        )?;
    let mut dists = Vec::with_capacity(times.len());
    let mut outflow = Vec::with_capacity(times.len());
    for (t, y) in sol.times.iter().zip(sol.states) {
        let out = y[len];
        if out > opts.outflow_tolerance {
            return Err(Error::Truncation {
                deficit: out,
                tolerance: opts.outflow_tolerance,
            });
        }
        let mut probs = y;
        probs.truncate(len);
        let dist = MasterDistribution::with_deficit(
            gen.index().clone(),
            probs,
            p0.deficit() + out.max(0.0),
        )
        .map_err(|e| match e {
            Error::Negativity { index, value, .. } => Error::Negativity {
                time: *t,
                index,
                value,
            },
            e => e,
        })?;
        dists.push(dist);
        outflow.push(out);
    }
    Ok(FkePath {
        times: sol.times,
        dists,
        outflow,
        stats: sol.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::super::distribution::{poisson_reference, product_poisson};
    use super::*;
    use crate::measure::SiteSpace;
    use crate::rates::fixtures::model;
    use crate::rates::{
        make_example_model, ExampleModelParams, HopKernelSpec, PairKernelSpec, Perturbed, ScalarFn,
    };
    use approx::assert_relative_eq;

    fn constant_model(beta: f64, hop: f64, space: SiteSpace) -> crate::rates::ExampleModel {
        make_example_model(
            ExampleModelParams {
                psi_bd: ScalarFn::Constant { value: beta },
                psi_h: ScalarFn::Constant { value: hop },
                competition: PairKernelSpec::UniformOffDiagonal { strength: 0.0 },
                hop_kernel: HopKernelSpec::Constant { value: 1.0 },
            },
            space,
        )
        .unwrap()
    }

    #[test]
    fn slot_layout_round_trips() {
        let m = model(3);
        let index = StateSpaceIndex::new(3, 2).unwrap();
        let g = build_generator(&m, 2, &index).unwrap();
        assert_eq!(g.slots(), 12);
        for slot in 0..g.slots() {
            assert_eq!(g.slot_of(g.slot_move(slot)), slot);
            assert_eq!(g.reverse_slot(g.reverse_slot(slot)), slot);
        }
    }

    #[test]
    fn empty_state_has_only_births() {
        let m = model(2);
        let index = StateSpaceIndex::new(2, 5).unwrap();
        let g = build_generator(&m, 3, &index).unwrap();
        let out: Vec<Move> = (0..g.slots())
            .filter(|&s| g.edge(0, s).is_some_and(|(_, r)| r > 0.0))
            .map(|s| g.slot_move(s))
            .collect();
        assert_eq!(out, vec![Move::Birth(0), Move::Birth(1)]);
        let expected: f64 = (0..2)
            .map(|s| 3.0 * m.birth(&[0.0, 0.0], s, Scale::Finite(3)))
            .sum();
        assert_relative_eq!(g.exit_rate(0), expected, max_relative = 1e-15);
    }

    #[test]
    fn single_site_is_immigration_death_chain() {
        let space = SiteSpace::line(&[0.0], vec![0.6]).unwrap();
        let beta = 1.5;
        let m = constant_model(beta, 0.0, space);
        let index = StateSpaceIndex::new(1, 8).unwrap();
        let g = build_generator(&m, 5, &index).unwrap();
        for k in 0..=8usize {
            let up = g.edge(k, 0);
            if k < 8 {
                assert_eq!(up.unwrap().0, k + 1);
                assert_relative_eq!(up.unwrap().1, 5.0 * beta * 0.6, max_relative = 1e-15);
            } else {
                assert!(up.is_none());
                assert_relative_eq!(g.clipped_rate(k), 5.0 * beta * 0.6, max_relative = 1e-15);
            }
            if k > 0 {
                assert_eq!(g.edge(k, 1), Some((k - 1, beta * k as f64)));
            }
        }
    }

    #[test]
    fn interior_rows_conserve_probability() {
        let m = model(2);
        let index = StateSpaceIndex::new(2, 6).unwrap();
        let g = build_generator(&m, 2, &index).unwrap();
        for i in 0..index.len() {
            let inbox: f64 = (0..g.slots())
                .filter_map(|s| g.edge(i, s))
                .map(|(_, r)| r)
                .sum();
            assert_relative_eq!(
                inbox + g.clipped_rate(i),
                g.exit_rate(i),
                max_relative = 1e-14
            );
            let k = index.state(i);
            if k.iter().all(|&c| c < 6) {
                assert_eq!(g.clipped_rate(i), 0.0);
            }
        }
    }

    #[test]
    fn reversibility_examples() {
        let space = SiteSpace::uniform_grid(2, 0.0, 1.0).unwrap();
        let m = model(2);
        let reference = poisson_reference(3, &space, 8, 1e-3).unwrap();
        let index = reference.index().clone();
        let g = build_generator(&m, 3, &index).unwrap();
        assert!(check_reversibility(&g, &reference).unwrap().max_rel <= 1e-12);

        let eps = 0.1;
        let bad = Perturbed::death_at(model(2), 0, eps).unwrap();
        let g_bad = build_generator(&bad, 3, &index).unwrap();
        let report = check_reversibility(&g_bad, &reference).unwrap();
        // the edge 0 → e_0 carries Π(e_0)·ε extra death flow
        let pi_e0 = reference.prob(&[1, 0]);
        assert!(report.max_abs >= 0.9 * eps * pi_e0);

        let zero = constant_model(0.0, 0.0, space);
        let g_zero = build_generator(&zero, 3, &index).unwrap();
        assert_eq!(
            check_reversibility(&g_zero, &reference).unwrap().max_abs,
            0.0
        );
    }

    #[test]
    fn reference_is_stationary() {
        let space = SiteSpace::uniform_grid(2, 0.0, 1.0).unwrap();
        let reference = poisson_reference(4, &space, 12, 1e-3).unwrap();
        let g = build_generator(&model(2), 4, reference.index()).unwrap();
        assert!(stationarity_residual(&g, &reference) <= 1e-12);
    }

    #[test]
    fn poisson_family_is_preserved() {
        // Immigration–death: Poisson(m0) stays Poisson with m' = nβπ − βm.
        let space = SiteSpace::line(&[0.0], vec![0.5]).unwrap();
        let beta = 1.2;
        let n = 6;
        let m = constant_model(beta, 0.0, space);
        let index = StateSpaceIndex::new(1, 40).unwrap();
        let g = build_generator(&m, n, &index).unwrap();
        let m0 = 7.0;
        let p0 = product_poisson(&index, &[m0]).unwrap();
        let times = [0.0, 0.4, 1.0];
        let path = integrate_fke(
            &p0,
            &g,
            &times,
            DtPolicy::adaptive(1e-11),
            FkeOptions::default(),
        )
        .unwrap();
        let stationary = f64::from(n) * 0.5;
        for (t, p) in times.iter().zip(&path.dists) {
            let mt = stationary + (m0 - stationary) * (-beta * t).exp();
            let exact = product_poisson(&index, &[mt]).unwrap();
            assert!(p.tv_distance(&exact).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let index = StateSpaceIndex::new(2, 8).unwrap();
        let g = build_generator(&model(2), 2, &index).unwrap();
        let p0 = MasterDistribution::dirac(index.clone(), &[3, 0]).unwrap();
        let times = [0.0, 0.5];
        let run = |policy| {
            integrate_fke(
                &p0,
                &g,
                &times,
                policy,
                FkeOptions {
                    outflow_tolerance: 1.0,
                },
            )
            .unwrap()
        };
        let exact = run(DtPolicy::adaptive(1e-13));
        let err = |dt| {
            run(DtPolicy::Fixed { dt }).dists[1]
                .tv_distance(&exact.dists[1])
                .unwrap()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((13.0..19.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn outflow_is_tracked_and_bounded() {
        let space = SiteSpace::line(&[0.0], vec![1.0]).unwrap();
        let m = constant_model(1.0, 0.0, space);
        let index = StateSpaceIndex::new(1, 3).unwrap();
        let g = build_generator(&m, 4, &index).unwrap();
        let p0 = MasterDistribution::dirac(index, &[3]).unwrap();
        let res = integrate_fke(
            &p0,
            &g,
            &[0.0, 1.0],
            DtPolicy::adaptive(1e-10),
            FkeOptions::default(),
        );
        assert!(matches!(res, Err(Error::Truncation { .. })));
        let path = integrate_fke(
            &p0,
            &g,
            &[0.0, 1.0],
            DtPolicy::adaptive(1e-10),
            FkeOptions {
                outflow_tolerance: 10.0,
            },
        )
        .unwrap();
        let last = &path.dists[1];
        assert_relative_eq!(last.total() + last.deficit(), 1.0, epsilon = 1e-9);
        assert!(last.deficit() > 0.1);
    }

    #[test]
    fn coo_export_lists_every_entry() {
        let space = SiteSpace::line(&[0.0], vec![1.0]).unwrap();
        let m = constant_model(1.0, 0.0, space);
        let index = StateSpaceIndex::new(1, 2).unwrap();
        let g = build_generator(&m, 1, &index).unwrap();
        let mut buf = Vec::new();
        g.write_coo(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "%%MatrixMarket matrix coordinate real general");
        assert_eq!(lines[2], "3 3 7");
        assert_eq!(lines[3], "1 1 -1e0");
        assert_eq!(lines[4], "1 2 1e0");
    }
}
