//! Exact stochastic simulation of the scaled birth–death–hopping process.
//!
//! Direct-method Gillespie: all propensities are recomputed after every
//! event, since rates depend on the whole configuration. For models whose
//! rates ignore the configuration, per-particle rates are computed once and
//! reused.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::master::{MasterDistribution, StateSpaceIndex};
use crate::measure::{tv_distance, Configuration, DensityField, SiteSpace};
use crate::rates::{RateModel, Scale};

/// Relative slack allowed when comparing propensities with declared bounds.
const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Birth { site: usize },
    Death { site: usize },
    Hop { from: usize, to: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
}

/// Jump rates out of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityTable {
    /// `n·b_s(ν)`
    pub birth: Vec<f64>,
    /// `d(ν, s)·k_s`
    pub death: Vec<f64>,
    /// Row-major `S × S`, `[from][to]`: `h_{s→r}(ν)·k_s`; zero on the diagonal.
    pub hop: Vec<f64>,
    pub total: f64,
}

impl PropensityTable {
    fn sites(&self) -> usize {
        self.birth.len()
    }

    fn recompute_total(&mut self) {
        self.total = self.birth.iter().sum::<f64>()
            + self.death.iter().sum::<f64>()
            + self.hop.iter().sum::<f64>();
    }

    /// The event whose cumulative propensity first exceeds `target`.
    fn select(&self, target: f64) -> EventKind {
        let s_count = self.sites();
        let mut acc = 0.0;
        for (site, &p) in self.birth.iter().enumerate() {
            acc += p;
            if target < acc {
                return EventKind::Birth { site };
            }
        }
        for (site, &p) in self.death.iter().enumerate() {
            acc += p;
            if target < acc {
                return EventKind::Death { site };
            }
        }
        let mut last = None;
        for (idx, &p) in self.hop.iter().enumerate() {
            if p > 0.0 {
                last = Some(idx);
            }
            acc += p;
            if target < acc && p > 0.0 {
                return EventKind::Hop {
                    from: idx / s_count,
                    to: idx % s_count,
                };
            }
        }
        // Rounding left `target` at or above the running sum: take the last
        // event with positive propensity.
        if let Some(idx) = last {
            return EventKind::Hop {
                from: idx / s_count,
                to: idx % s_count,
            };
        }
        if let Some(site) = self.death.iter().rposition(|&p| p > 0.0) {
            return EventKind::Death { site };
        }
        let site = self.birth.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        EventKind::Birth { site }
    }
}

pub fn propensities<M: RateModel + ?Sized>(
    c: &Configuration,
    model: &M,
) -> Result<PropensityTable> {
    c.check_bound(model.space())?;
    let n = c.scale();
    let nu = c.masses();
    let s_count = c.sites();
    let scale = Scale::Finite(n);
    let nf = f64::from(n);
    let mut table = PropensityTable {
        birth: (0..s_count)
            .map(|s| nf * model.birth(&nu, s, scale))
            .collect(),
        death: vec![0.0; s_count],
        hop: vec![0.0; s_count * s_count],
        total: 0.0,
    };
    for (s, &k) in c.counts().iter().enumerate() {
        if k == 0 {
            continue;
        }
        let k = f64::from(k);
        table.death[s] = model.death(&nu, s, scale) * k;
        for r in 0..s_count {
            if r != s {
                table.hop[s * s_count + r] = model.hop(&nu, s, r, scale) * k;
            }
        }
    }
    table.recompute_total();
    check_table(&table, c, model)?;
    Ok(table)
}

fn check_table<M: RateModel + ?Sized>(
    table: &PropensityTable,
    c: &Configuration,
    model: &M,
) -> Result<()> {
    let bounds = model.bounds();
    let nf = f64::from(c.scale());
    let s_count = c.sites();
    let exceeds = |value: f64, bound: f64| value > bound * (1.0 + BOUND_SLACK) + f64::MIN_POSITIVE;
    let parts = table.birth.iter().chain(&table.death).chain(&table.hop);
    if parts.clone().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invalid("propensities must be finite and nonnegative"));
    }
    let birth: f64 = table.birth.iter().sum();
    if exceeds(birth, nf * bounds.birth_total) {
        return Err(Error::BoundViolation {
            what: "total birth propensity".into(),
            value: birth,
            bound: nf * bounds.birth_total,
        });
    }
    for (s, &k) in c.counts().iter().enumerate() {
        let k = f64::from(k);
        if exceeds(table.death[s], bounds.death * k) {
            return Err(Error::BoundViolation {
                what: format!("death propensity at site {s}"),
                value: table.death[s],
                bound: bounds.death * k,
            });
        }
        let hop: f64 = table.hop[s * s_count..(s + 1) * s_count].iter().sum();
        if exceeds(hop, bounds.hop_total * k) {
            return Err(Error::BoundViolation {
                what: format!("hop propensity out of site {s}"),
                value: hop,
                bound: bounds.hop_total * k,
            });
        }
    }
    Ok(())
}

/// Per-particle rates of a configuration-independent model.
#[derive(Debug, Clone)]
struct UnitRates {
    birth: Vec<f64>,
    death: Vec<f64>,
    hop: Vec<f64>,
}

impl UnitRates {
    fn new<M: RateModel + ?Sized>(model: &M, n: u32) -> Self {
        let s_count = model.space().len();
        let nu = vec![0.0; s_count];
        let scale = Scale::Finite(n);
        let nf = f64::from(n);
        let mut hop = vec![0.0; s_count * s_count];
        for s in 0..s_count {
            for r in 0..s_count {
                if r != s {
                    hop[s * s_count + r] = model.hop(&nu, s, r, scale);
                }
            }
        }
        Self {
            birth: (0..s_count)
                .map(|s| nf * model.birth(&nu, s, scale))
                .collect(),
            death: (0..s_count).map(|s| model.death(&nu, s, scale)).collect(),
            hop,
        }
    }

    fn fill(&self, counts: &[u32], table: &mut PropensityTable) {
        let s_count = counts.len();
        table.birth.copy_from_slice(&self.birth);
        for (s, &k) in counts.iter().enumerate() {
            let k = f64::from(k);
            table.death[s] = self.death[s] * k;
            for r in 0..s_count {
                table.hop[s * s_count + r] = self.hop[s * s_count + r] * k;
            }
        }
        table.recompute_total();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Jump {
        dt: f64,
        kind: EventKind,
    },
    /// No transition is possible; the waiting time is `+∞`.
    Frozen,
}

pub fn apply(c: &mut Configuration, kind: EventKind) {
    match kind {
        EventKind::Birth { site } => c.add(site),
        EventKind::Death { site } => c.remove(site),
        EventKind::Hop { from, to } => {
            c.remove(from);
            c.add(to);
        }
    }
}

fn draw<R: Rng + ?Sized>(table: &PropensityTable, rng: &mut R) -> StepOutcome {
    if !(table.total > 0.0) {
        return StepOutcome::Frozen;
    }
    let e: f64 = Exp1.sample(rng);
    let dt = e / table.total;
    let kind = table.select(rng.random::<f64>() * table.total);
    StepOutcome::Jump { dt, kind }
}

/// One Gillespie step: samples the waiting time and event, then applies it to `c`.
pub fn step<M: RateModel + ?Sized, R: Rng + ?Sized>(
    c: &mut Configuration,
    model: &M,
    rng: &mut R,
) -> Result<StepOutcome> {
    let table = propensities(c, model)?;
    let outcome = draw(&table, rng);
    if let StepOutcome::Jump { kind, .. } = outcome {
        apply(c, kind);
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOptions {
    pub trajectories: usize,
    pub base_seed: u64,
    pub record_events: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub index: usize,
    /// `snapshots[i]` holds the counts at `snapshot_times[i]`.
    pub snapshots: Vec<Vec<u32>>,
    pub events: Option<Vec<EventRecord>>,
    pub births: u64,
    pub deaths: u64,
    pub hops: u64,
    /// Time at which the trajectory reached an absorbing state, if it did.
    pub frozen_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEnsemble {
    pub initial: Configuration,
    pub horizon: f64,
    pub snapshot_times: Vec<f64>,
    pub base_seed: u64,
    pub trajectories: Vec<Trajectory>,
}

/// Deterministic per-trajectory generator: one ChaCha stream per index.
pub fn trajectory_rng(base_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index as u64);
    rng
}

fn run_trajectory<M: RateModel + ?Sized>(
    c0: &Configuration,
    model: &M,
    horizon: f64,
    times: &[f64],
    index: usize,
    opts: &EnsembleOptions,
    unit: Option<&UnitRates>,
) -> Result<Trajectory> {
    let mut rng = trajectory_rng(opts.base_seed, index);
    let mut c = c0.clone();
    let mut t = 0.0;
    let mut out = Trajectory {
        index,
        snapshots: Vec::with_capacity(times.len()),
        events: opts.record_events.then(Vec::new),
        births: 0,
        deaths: 0,
        hops: 0,
        frozen_at: None,
    };
    let s_count = c.sites();
    let mut table = PropensityTable {
        birth: vec![0.0; s_count],
        death: vec![0.0; s_count],
        hop: vec![0.0; s_count * s_count],
        total: 0.0,
    };
    let mut next = 0;
    loop {
        match unit {
            Some(u) => {
                u.fill(c.counts(), &mut table);
                check_table(&table, &c, model)?;
            }
            None => table = propensities(&c, model)?,
        }
        let outcome = draw(&table, &mut rng);
        let t_next = match outcome {
            StepOutcome::Jump { dt, .. } => t + dt,
            StepOutcome::Frozen => f64::INFINITY,
        };
        // Càdlàg: a snapshot at time τ sees every event with time ≤ τ.
        while next < times.len() && times[next] < t_next {
            out.snapshots.push(c.counts().to_vec());
            next += 1;
        }
        let StepOutcome::Jump { kind, .. } = outcome else {
            out.frozen_at = Some(t);
            break;
        };
        if t_next > horizon {
            break;
        }
        t = t_next;
        apply(&mut c, kind);
        match kind {
            EventKind::Birth { .. } => out.births += 1,
            EventKind::Death { .. } => out.deaths += 1,
            EventKind::Hop { .. } => out.hops += 1,
        }
        if let Some(log) = out.events.as_mut() {
            log.push(EventRecord { time: t, kind });
        }
    }
    while out.snapshots.len() < times.len() {
        out.snapshots.push(c.counts().to_vec());
    }
    Ok(out)
}

/// Runs independent trajectories from `c0` up to `horizon`, in parallel.
///
/// Trajectory `i` draws from [`trajectory_rng`]`(base_seed, i)`, so the
/// ensemble is identical for any thread count.
pub fn run_ensemble<M: RateModel + ?Sized>(
    c0: &Configuration,
    model: &M,
    horizon: f64,
    snapshot_times: &[f64],
    opts: &EnsembleOptions,
) -> Result<TrajectoryEnsemble> {
    c0.check_bound(model.space())?;
    if opts.trajectories == 0 {
        return Err(invalid("ensemble needs at least one trajectory"));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon must be finite and nonnegative"));
    }
    if snapshot_times
        .iter()
        .any(|&t| !(0.0..=horizon).contains(&t))
        || snapshot_times.windows(2).any(|w| w[1] < w[0])
    {
        return Err(invalid(
            "snapshot times must be sorted and lie in [0, horizon]",
        ));
    }
    let unit = model
        .is_configuration_independent()
        .then(|| UnitRates::new(model, c0.scale()));
    let trajectories = (0..opts.trajectories)
        .into_par_iter()
        .map(|i| run_trajectory(c0, model, horizon, snapshot_times, i, opts, unit.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryEnsemble {
        initial: c0.clone(),
        horizon,
        snapshot_times: snapshot_times.to_vec(),
        base_seed: opts.base_seed,
        trajectories,
    })
}

/// Reconstructs the state at time `t` from the initial state and an event log.
pub fn replay(c0: &Configuration, events: &[EventRecord], t: f64) -> Configuration {
    let mut c = c0.clone();
    for e in events.iter().take_while(|e| e.time <= t) {
        apply(&mut c, e.kind);
    }
    c
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn from_samples(xs: impl ExactSizeIterator<Item = f64>) -> Self {
        let m = xs.len();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for x in xs {
            sum += x;
            sum_sq += x * x;
        }
        let mf = m as f64;
        let mean = sum / mf;
        let var = if m > 1 {
            ((sum_sq - mf * mean * mean) / (mf - 1.0)).max(0.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / mf).sqrt(),
        }
    }
}

impl TrajectoryEnsemble {
    pub fn scale(&self) -> u32 {
        self.initial.scale()
    }

    pub fn snapshots_at(&self, time_index: usize) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        self.trajectories
            .iter()
            .map(move |tr| tr.snapshots[time_index].as_slice())
    }

    fn check_time_index(&self, time_index: usize) -> Result<()> {
        if time_index >= self.snapshot_times.len() {
            return Err(invalid(format!("no snapshot with index {time_index}")));
        }
        Ok(())
    }

    /// Mean particle count per site at a snapshot.
    pub fn mean_counts(&self, time_index: usize) -> Result<Vec<Estimate>> {
        self.check_time_index(time_index)?;
        let s_count = self.initial.sites();
        Ok((0..s_count)
            .map(|s| Estimate::from_samples(self.snapshots_at(time_index).map(|k| f64::from(k[s]))))
            .collect())
    }
}

/// `(1/M) Σ_m ‖ν^(m)_t − uπ‖_TV` with its standard error.
pub fn w1_to_dirac(
    ensemble: &TrajectoryEnsemble,
    time_index: usize,
    target: &DensityField,
    space: &SiteSpace,
) -> Result<Estimate> {
    ensemble.check_time_index(time_index)?;
    if target.len() != space.len() || ensemble.initial.sites() != space.len() {
        return Err(invalid(
            "target, space and ensemble disagree on the number of sites",
        ));
    }
    let nu_t = target.to_measure(space);
    let nf = f64::from(ensemble.scale());
    let mut masses = vec![0.0; space.len()];
    Ok(Estimate::from_samples(
        ensemble.snapshots_at(time_index).map(|k| {
            for (m, &c) in masses.iter_mut().zip(k) {
                *m = f64::from(c) / nf;
            }
            tv_distance(&masses, &nu_t)
        }),
    ))
}

/// Histogram of the snapshots at one time on the truncated state space.
///
/// Snapshots with a count above the cap are dropped and their share is
/// reported as the distribution's deficit.
pub fn empirical_law(
    ensemble: &TrajectoryEnsemble,
    time_index: usize,
    index: &StateSpaceIndex,
) -> Result<MasterDistribution> {
    ensemble.check_time_index(time_index)?;
    if index.sites() != ensemble.initial.sites() {
        return Err(invalid(
            "state index and ensemble disagree on the number of sites",
        ));
    }
    let mut hist = vec![0u64; index.len()];
    let mut overflow = 0u64;
    for k in ensemble.snapshots_at(time_index) {
        match index.index_of(k) {
            Some(i) => hist[i] += 1,
            None => overflow += 1,
        }
    }
    let m = ensemble.trajectories.len() as f64;
    let probs = hist.iter().map(|&h| h as f64 / m).collect();
    MasterDistribution::with_deficit(index.clone(), probs, overflow as f64 / m)
}

/// Writes `trajectory,time,site,count` rows for every snapshot.
pub fn write_snapshots_csv<W: Write>(
    ensemble: &TrajectoryEnsemble,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "trajectory,time,site,count")?;
    for tr in &ensemble.trajectories {
        for (t, snap) in ensemble.snapshot_times.iter().zip(&tr.snapshots) {
            for (s, k) in snap.iter().enumerate() {
                writeln!(w, "{},{},{},{}", tr.index, t, s, k)?;
            }
        }
    }
    Ok(())
}

/// Ensemble-level statistics for JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n: u32,
    pub trajectories: usize,
    pub base_seed: u64,
    pub times: Vec<f64>,
    /// `mean_counts[t][s]`
    pub mean_counts: Vec<Vec<Estimate>>,
    pub mean_births: f64,
    pub mean_deaths: f64,
    pub mean_hops: f64,
    pub frozen: usize,
}

impl EnsembleSummary {
    pub fn new(ensemble: &TrajectoryEnsemble) -> Self {
        let m = ensemble.trajectories.len() as f64;
        let mean = |f: fn(&Trajectory) -> u64| {
            ensemble
                .trajectories
                .iter()
                .map(|t| f(t) as f64)
                .sum::<f64>()
                / m
        };
        Self {
            n: ensemble.scale(),
            trajectories: ensemble.trajectories.len(),
            base_seed: ensemble.base_seed,
            times: ensemble.snapshot_times.clone(),
            mean_counts: (0..ensemble.snapshot_times.len())
                .map(|i| ensemble.mean_counts(i).expect("index in range"))
                .collect(),
            mean_births: mean(|t| t.births),
            mean_deaths: mean(|t| t.deaths),
            mean_hops: mean(|t| t.hops),
            frozen: ensemble
                .trajectories
                .iter()
                .filter(|t| t.frozen_at.is_some())
                .count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::fixtures::model;
    use crate::rates::{
        make_example_model, ExampleModelParams, HopKernelSpec, PairKernelSpec, ScalarFn,
    };

    fn linear(beta: f64, delta: f64, space: SiteSpace) -> impl RateModel {
        // birth β·π, death δ: constant rates with β ≠ δ break detailed balance,
        // so this is a plain rate table rather than an example model.
        struct Linear {
            space: SiteSpace,
            beta: f64,
            delta: f64,
        }
        impl RateModel for Linear {
            fn space(&self) -> &SiteSpace {
                &self.space
            }
            fn birth(&self, _: &[f64], s: usize, _: Scale) -> f64 {
                self.beta * self.space.weight(s)
            }
            fn death(&self, _: &[f64], _: usize, _: Scale) -> f64 {
                self.delta
            }
            fn hop(&self, _: &[f64], _: usize, _: usize, _: Scale) -> f64 {
                0.0
            }
            fn bounds(&self) -> crate::rates::RateBounds {
                crate::rates::RateBounds {
                    birth_total: self.beta * self.space.total_mass(),
                    death: self.delta,
                    hop_total: 0.0,
                }
            }
            fn is_configuration_independent(&self) -> bool {
                true
            }
        }
        Linear { space, beta, delta }
    }

    fn opts(m: usize, seed: u64) -> EnsembleOptions {
        EnsembleOptions {
            trajectories: m,
            base_seed: seed,
            record_events: true,
        }
    }

    #[test]
    fn empty_configuration_only_births() {
        let m = model(3);
        let c = Configuration::empty(5, 3).unwrap();
        let p = propensities(&c, &m).unwrap();
        assert!(p.death.iter().chain(&p.hop).all(|&x| x == 0.0));
        for s in 0..3 {
            let expected = 5.0 * m.birth(&[0.0; 3], s, Scale::Finite(5));
            assert_eq!(p.birth[s], expected);
        }
    }

    #[test]
    fn single_site_linear_propensities() {
        let space = SiteSpace::line(&[0.0], vec![0.4]).unwrap();
        let m = linear(2.0, 0.7, space);
        let c = Configuration::new(10, vec![6]).unwrap();
        let p = propensities(&c, &m).unwrap();
        assert!((p.birth[0] - 10.0 * 2.0 * 0.4).abs() < 1e-12);
        assert!((p.death[0] - 0.7 * 6.0).abs() < 1e-12);
    }

    // Enumerates every transition k → k' with its rate straight from the generator.
    fn enumerated_total(m: &dyn RateModel, c: &Configuration) -> f64 {
        let n = c.scale();
        let nu = c.masses();
        let s_count = c.sites();
        let mut total = 0.0;
        for s in 0..s_count {
            total += f64::from(n) * m.birth(&nu, s, Scale::Finite(n));
            for _ in 0..c.counts()[s] {
                total += m.death(&nu, s, Scale::Finite(n));
                for r in (0..s_count).filter(|&r| r != s) {
                    total += m.hop(&nu, s, r, Scale::Finite(n));
                }
            }
        }
        total
    }

    #[test]
    fn total_matches_enumeration() {
        let m = model(2);
        for k0 in 0..=5 {
            for k1 in 0..=5 {
                let c = Configuration::new(3, vec![k0, k1]).unwrap();
                let p = propensities(&c, &m).unwrap();
                let oracle = enumerated_total(&m, &c);
                assert!((p.total - oracle).abs() <= 1e-12 * oracle.max(1.0));
                let parts: f64 = p.birth.iter().chain(&p.death).chain(&p.hop).sum();
                assert!((p.total - parts).abs() <= 1e-12 * p.total);
            }
        }
    }

    #[test]
    fn bound_violation_is_reported() {
        struct Liar(SiteSpace);
        impl RateModel for Liar {
            fn space(&self) -> &SiteSpace {
                &self.0
            }
            fn birth(&self, _: &[f64], _: usize, _: Scale) -> f64 {
                1.0
            }
            fn death(&self, _: &[f64], _: usize, _: Scale) -> f64 {
                1.0
            }
            fn hop(&self, _: &[f64], _: usize, _: usize, _: Scale) -> f64 {
                0.0
            }
            fn bounds(&self) -> crate::rates::RateBounds {
                crate::rates::RateBounds {
                    birth_total: 0.5,
                    death: 1.0,
                    hop_total: 0.0,
                }
            }
        }
        let m = Liar(SiteSpace::line(&[0.0], vec![1.0]).unwrap());
        let c = Configuration::new(2, vec![1]).unwrap();
        assert!(matches!(
            propensities(&c, &m),
            Err(Error::BoundViolation { .. })
        ));
    }

    #[test]
    fn hop_conserves_mass_and_death_empties() {
        let mut c = Configuration::new(4, vec![1, 3]).unwrap();
        let before = c.tv_mass();
        apply(&mut c, EventKind::Hop { from: 1, to: 0 });
        assert_eq!(c.tv_mass(), before);
        apply(&mut c, EventKind::Death { site: 0 });
        apply(&mut c, EventKind::Death { site: 0 });
        assert_eq!(c.counts(), &[0, 2]);
    }

    #[test]
    fn absorbing_state_freezes() {
        let space = SiteSpace::line(&[0.0], vec![1.0]).unwrap();
        let m = linear(0.0, 1.0, space);
        let mut c = Configuration::empty(3, 1).unwrap();
        let mut rng = trajectory_rng(1, 0);
        assert_eq!(step(&mut c, &m, &mut rng).unwrap(), StepOutcome::Frozen);
    }

    #[test]
    fn event_frequencies_match_propensities() {
        let m = model(2);
        let c0 = Configuration::new(2, vec![3, 1]).unwrap();
        let table = propensities(&c0, &m).unwrap();
        let mut rng = trajectory_rng(99, 0);
        let draws = 100_000usize;
        let mut counts = [0usize; 6];
        for _ in 0..draws {
            let mut c = c0.clone();
            let StepOutcome::Jump { kind, .. } = step(&mut c, &m, &mut rng).unwrap() else {
                panic!("state is not absorbing")
            };
            let slot = match kind {
                EventKind::Birth { site } => site,
                EventKind::Death { site } => 2 + site,
                EventKind::Hop { from, .. } => 4 + from,
            };
            counts[slot] += 1;
        }
        let probs = [
            table.birth[0],
            table.birth[1],
            table.death[0],
            table.death[1],
            table.hop[1],
            table.hop[2],
        ];
        for (obs, p) in counts.iter().zip(probs) {
            let p = p / table.total;
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!((*obs as f64 - draws as f64 * p).abs() <= 3.0 * sigma.max(1.0));
        }
    }

    #[test]
    fn trivial_ensemble_returns_initial_state() {
        let m = model(2);
        let c0 = Configuration::new(4, vec![2, 5]).unwrap();
        let e = run_ensemble(&c0, &m, 0.0, &[0.0], &opts(1, 0)).unwrap();
        assert_eq!(e.trajectories[0].snapshots[0], vec![2, 5]);
    }

    #[test]
    fn ensembles_are_reproducible_across_thread_counts() {
        let m = model(2);
        let c0 = Configuration::new(4, vec![2, 5]).unwrap();
        let times = [0.0, 0.5, 1.0];
        let a = run_ensemble(&c0, &m, 1.0, &times, &opts(64, 7)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool.install(|| run_ensemble(&c0, &m, 1.0, &times, &opts(64, 7)).unwrap());
        assert_eq!(a, b);
        let c = run_ensemble(&c0, &m, 1.0, &times, &opts(64, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn snapshots_replay_from_event_logs() {
        let m = model(3);
        let c0 = Configuration::new(3, vec![1, 4, 2]).unwrap();
        let times = [0.0, 0.1, 0.35, 0.8, 1.5];
        let e = run_ensemble(&c0, &m, 1.5, &times, &opts(20, 3)).unwrap();
        for tr in &e.trajectories {
            let log = tr.events.as_ref().unwrap();
            assert!(log.windows(2).all(|w| w[0].time < w[1].time));
            for (t, snap) in times.iter().zip(&tr.snapshots) {
                assert_eq!(replay(&c0, log, *t).counts(), snap.as_slice());
            }
            let last = tr.snapshots.last().unwrap();
            let particles: u64 = last.iter().map(|&k| u64::from(k)).sum();
            assert_eq!(
                particles as i64,
                c0.particles() as i64 + tr.births as i64 - tr.deaths as i64
            );
        }
    }

    #[test]
    fn pure_death_matches_binomial_thinning() {
        let space = SiteSpace::line(&[0.0], vec![1.0]).unwrap();
        let delta = 0.8;
        let m = linear(0.0, delta, space.clone());
        let k0 = 40u32;
        let n = 40u32;
        let t = 1.0;
        let c0 = Configuration::new(n, vec![k0]).unwrap();
        let trajectories = 4000;
        let e = run_ensemble(&c0, &m, t, &[t], &opts(trajectories, 5)).unwrap();
        let p = (-delta * t).exp();
        let mean = e.mean_counts(0).unwrap()[0].mean;
        let sigma = (f64::from(k0) * p * (1.0 - p) / trajectories as f64).sqrt();
        assert!((mean - f64::from(k0) * p).abs() <= 3.0 * sigma);

        // E|K/n − p k0/n| by summing the binomial pmf.
        let mut pmf = (1.0 - p).powi(k0 as i32);
        let mut oracle = 0.0;
        for j in 0..=k0 {
            oracle += pmf * (f64::from(j) - f64::from(k0) * p).abs() / f64::from(n);
            pmf *= f64::from(k0 - j) / f64::from(j + 1) * p / (1.0 - p);
        }
        let target = DensityField::new(vec![p * f64::from(k0) / f64::from(n)]).unwrap();
        let w1 = w1_to_dirac(&e, 0, &target, &space).unwrap();
        assert!((w1.mean - oracle).abs() <= 3.0 * w1.std_err);
    }

    #[test]
    fn w1_examples() {
        let space = SiteSpace::line(&[0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let c0 = Configuration::new(2, vec![1, 1]).unwrap();
        let mut e = TrajectoryEnsemble {
            initial: c0,
            horizon: 0.0,
            snapshot_times: vec![0.0],
            base_seed: 0,
            trajectories: vec![],
        };
        let tr = |index, snap: Vec<u32>| Trajectory {
            index,
            snapshots: vec![snap],
            events: None,
            births: 0,
            deaths: 0,
            hops: 0,
            frozen_at: None,
        };
        e.trajectories = vec![tr(0, vec![1, 1]), tr(1, vec![1, 1])];
        let target = DensityField::constant(2, 1.0).unwrap();
        assert_eq!(w1_to_dirac(&e, 0, &target, &space).unwrap().mean, 0.0);

        e.trajectories = vec![tr(0, vec![3, 1]), tr(1, vec![0, 1])];
        // TV distances 1.0 and 0.5
        assert_eq!(w1_to_dirac(&e, 0, &target, &space).unwrap().mean, 0.75);

        let index = StateSpaceIndex::new(2, 4).unwrap();
        let law = empirical_law(&e, 0, &index).unwrap();
        assert_eq!(law.prob(&[3, 1]), 0.5);
        assert_eq!(law.prob(&[0, 1]), 0.5);
        let small = StateSpaceIndex::new(2, 2).unwrap();
        assert_eq!(empirical_law(&e, 0, &small).unwrap().deficit(), 0.5);

        e.trajectories.truncate(1);
        let dirac = empirical_law(&e, 0, &index).unwrap();
        assert_eq!(dirac.prob(&[3, 1]), 1.0);
    }

    #[test]
    fn csv_schema() {
        let m = make_example_model(
            ExampleModelParams {
                psi_bd: ScalarFn::Constant { value: 1.0 },
                psi_h: ScalarFn::Constant { value: 1.0 },
                competition: PairKernelSpec::UniformOffDiagonal { strength: 0.0 },
                hop_kernel: HopKernelSpec::Constant { value: 1.0 },
            },
            SiteSpace::uniform_grid(2, 0.0, 1.0).unwrap(),
        )
        .unwrap();
        let c0 = Configuration::new(2, vec![1, 0]).unwrap();
        let e = run_ensemble(&c0, &m, 1.0, &[0.0, 1.0], &opts(2, 0)).unwrap();
        let mut buf = Vec::new();
        write_snapshots_csv(&e, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("trajectory,time,site,count"));
        assert_eq!(lines.count(), 2 * 2 * 2);
        assert_eq!(text.lines().nth(1), Some("0,0,0,1"));
    }
}
