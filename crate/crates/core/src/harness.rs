//! Sweeps over the population scale `n` that compare the particle laws with
//! the mean-field solution.
//!
//! One mean-field reference path is computed per plan. Each `n` is an
//! independent cell: it builds the initial law, runs the master solver
//! and/or an SSA ensemble, and evaluates the distance to `δ_{ν_t}`, the
//! scaled entropy and the propagation-of-chaos entropy at every observation
//! time. Trend statistics are then assembled across the `n`-list.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::master::{
    build_generator, expected_tv_distance, integrate_fke, jump_activity, poc_entropy,
    poisson_reference, product_poisson, scaled_entropy, FkeOptions, MasterDistribution,
    StateSpaceIndex,
};
use crate::meanfield::{integrate_meanfield, meanfield_energy, MeanFieldPath};
use crate::measure::{tv_distance, Configuration, DensityField, SiteSpace};
use crate::ode::DtPolicy;
use crate::rates::{make_example_model, ExampleModelParams, RateModel};
use crate::ssa::{run_ensemble, w1_to_dirac, EnsembleOptions, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    Master,
    Ssa,
    Both,
}

impl SweepMode {
    fn master(self) -> bool {
        matches!(self, SweepMode::Master | SweepMode::Both)
    }

    fn ssa(self) -> bool {
        matches!(self, SweepMode::Ssa | SweepMode::Both)
    }
}

/// Family of initial laws `P^n_0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialFamily {
    /// `δ` at the rounded configuration `k_s = round(n u0_s π_s)`.
    Dirac,
    /// Independent `Poisson(n u0_s π_s)` counts. Master mode only.
    ProductPoisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepTolerances {
    /// Largest truncation deficit or boundary outflow accepted per cell.
    pub truncation: f64,
    /// SSA and master estimates of `𝔡(P^n_t, δ_{ν_t})` must agree within this many standard errors.
    pub mc_sigmas: f64,
    /// Final-over-first ratio required of the entropy gap and PoC columns.
    pub final_ratio: f64,
}

impl Default for SweepTolerances {
    fn default() -> Self {
        Self {
            truncation: 1e-6,
            mc_sigmas: 3.0,
            final_ratio: 0.5,
        }
    }
}

fn default_master_dt() -> DtPolicy {
    DtPolicy::Adaptive {
        rtol: 1e-9,
        atol: 1e-14,
    }
}

fn default_meanfield_dt() -> DtPolicy {
    DtPolicy::Adaptive {
        rtol: 1e-10,
        atol: 1e-14,
    }
}

fn default_trajectories() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub space: SiteSpace,
    pub model: ExampleModelParams,
    #[serde(default)]
    pub finite_n_correction: f64,
    pub u0: DensityField,
    pub ns: Vec<u32>,
    pub horizon: f64,
    /// Observation times in `[0, horizon]`.
    pub times: Vec<f64>,
    pub mode: SweepMode,
    pub initial: InitialFamily,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    /// Per-site count cap for the master solver; chosen per `n` when absent.
    #[serde(default)]
    pub k_max: Option<u32>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_master_dt")]
    pub master_dt: DtPolicy,
    #[serde(default = "default_meanfield_dt")]
    pub meanfield_dt: DtPolicy,
    #[serde(default)]
    pub tolerances: SweepTolerances,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        let s = self.space.len();
        if self.u0.len() != s {
            return Err(invalid("u0 has the wrong number of sites"));
        }
        if self.ns.is_empty() || self.ns[0] == 0 {
            return Err(invalid("the n-list must be nonempty and positive"));
        }
        if self.ns.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("the n-list must be strictly increasing"));
        }
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(invalid("horizon must be finite and nonnegative"));
        }
        if self.times.is_empty()
            || self.times.windows(2).any(|w| w[1] <= w[0])
            || self
                .times
                .iter()
                .any(|&t| !(0.0..=self.horizon).contains(&t))
        {
            return Err(invalid(
                "observation times must be strictly increasing and lie in [0, horizon]",
            ));
        }
        if self.initial == InitialFamily::ProductPoisson && !self.mode.master() {
            return Err(invalid("product-Poisson initial data needs master mode"));
        }
        if self.mode.ssa() && self.trajectories == 0 {
            return Err(invalid("SSA mode needs at least one trajectory"));
        }
        self.master_dt.validate()?;
        self.meanfield_dt.validate()?;
        if self.mode.master() {
            if let Some(cap) = self.k_max {
                for &n in &self.ns {
                    let needed = self.required_cap(n);
                    if f64::from(cap) < needed {
                        return Err(invalid(format!(
                            "k_max = {cap} is below the six-sigma headroom {needed:.1} at n = {n}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// `n·max_s(u0_s π_s) + 6√(n·max_s π_s)`.
    pub fn required_cap(&self, n: u32) -> f64 {
        let nf = f64::from(n);
        let w = self.space.weights();
        let peak = self
            .u0
            .values()
            .iter()
            .zip(w)
            .fold(0.0f64, |m, (u, p)| m.max(u * p));
        let pi_max = w.iter().cloned().fold(0.0f64, f64::max);
        nf * peak + 6.0 * (nf * pi_max).sqrt()
    }

    /// The cap used at scale `n`: the plan's `k_max`, or [`auto_cap`].
    pub fn cap_for(&self, n: u32) -> u32 {
        self.k_max
            .unwrap_or_else(|| auto_cap(&self.u0, &self.space, n))
    }

    pub fn build_model(&self) -> Result<crate::rates::ExampleModel> {
        make_example_model(self.model.clone(), self.space.clone())?
            .with_finite_n_correction(self.finite_n_correction)
    }
}

/// `⌈n m + 8√(n m)⌉ + 2` with `m = max_s max(u0_s, 1) π_s`. Six sigma
/// bounds the marginals but lets boundary outflow accumulate over time.
pub fn auto_cap(u0: &DensityField, space: &SiteSpace, n: u32) -> u32 {
    let m = u0
        .values()
        .iter()
        .zip(space.weights())
        .fold(0.0f64, |acc, (u, p)| acc.max(u.max(1.0) * p));
    let nm = f64::from(n) * m;
    (nm + 8.0 * nm.sqrt()).ceil() as u32 + 2
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Configuration(Configuration),
    Law(MasterDistribution),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundedInitial {
    pub state: InitialState,
    pub counts: Vec<u32>,
    /// `‖ν^(n)_0 − u0 π‖_TV`, at most `S/(2n)`.
    pub rounding_error: f64,
}

/// Rounds `n u0_s π_s` to the nearest count. With `cap = None` the result is
/// the SSA start configuration, otherwise the Dirac law on `{0..cap}^S`.
pub fn dirac_initial_law(
    u0: &DensityField,
    n: u32,
    space: &SiteSpace,
    cap: Option<u32>,
) -> Result<RoundedInitial> {
    if u0.len() != space.len() {
        return Err(invalid("u0 has the wrong number of sites"));
    }
    if n == 0 {
        return Err(invalid("n must be positive"));
    }
    let nf = f64::from(n);
    let target = u0.to_measure(space);
    let counts: Vec<u32> = target
        .iter()
        .map(|m| {
            let k = (nf * m).round();
            if k > f64::from(u32::MAX) {
                Err(invalid("rounded count overflows"))
            } else {
                Ok(k as u32)
            }
        })
        .collect::<Result<_>>()?;
    let masses: Vec<f64> = counts.iter().map(|&k| f64::from(k) / nf).collect();
    let rounding_error = tv_distance(&masses, &target);
    let state = match cap {
        None => InitialState::Configuration(Configuration::new(n, counts.clone())?),
        Some(cap) => {
            if let Some(&k) = counts.iter().find(|&&k| k > cap) {
                return Err(invalid(format!("rounded count {k} exceeds the cap {cap}")));
            }
            InitialState::Law(MasterDistribution::dirac(
                StateSpaceIndex::new(space.len(), cap)?,
                &counts,
            )?)
        }
    };
    Ok(RoundedInitial {
        state,
        counts,
        rounding_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: u32,
    pub t: f64,
    /// Exact `∫‖ν − ν_t‖ dP^n_t` from the master solver.
    pub w1_master: Option<f64>,
    pub w1_ssa: Option<Estimate>,
    /// `E_n(P^n_t)`.
    pub entropy_n: Option<f64>,
    /// `Ent(ν_t | π)`.
    pub entropy_limit: f64,
    pub entropy_gap: Option<f64>,
    /// `(1/n) Ent(P^n_t | Π^n_{ν_t})`.
    pub poc: Option<f64>,
    pub deficit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub n: u32,
    pub k_max: Option<u32>,
    pub rounding_error: f64,
    /// `|E_n(P^n_0) − Ent(ν_0 | π)|`, master mode only.
    pub initial_gap: Option<f64>,
    /// `max_t` of the expected jump activity, an estimate of the Lipschitz-in-time constant.
    pub lipschitz_estimate: Option<f64>,
    /// Observation times where SSA and master disagree beyond `mc_sigmas`.
    pub mc_disagreements: Vec<f64>,
    pub poc_skipped: Vec<PocSkip>,
    pub master_seconds: Option<f64>,
    pub ssa_seconds: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PocSkip {
    pub n: u32,
    pub t: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    W1Master,
    W1Ssa,
    EntropyGap,
    Poc,
    InitialGap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub quantity: Quantity,
    pub t: f64,
    /// One value per `n`, `None` where the cell failed or was skipped.
    pub values: Vec<Option<f64>>,
    pub strictly_decreasing: bool,
    pub nonincreasing: bool,
    pub final_over_first: Option<f64>,
    pub passed: bool,
}

impl TrendCheck {
    fn new(quantity: Quantity, t: f64, values: Vec<Option<f64>>, final_ratio: Option<f64>) -> Self {
        let complete: Option<Vec<f64>> = values.iter().cloned().collect();
        let (strict, weak, ratio) = match &complete {
            Some(v) => (
                v.windows(2).all(|w| w[1] < w[0]),
                v.windows(2).all(|w| w[1] <= w[0]),
                match (v.first(), v.last()) {
                    (Some(&a), Some(&b)) if a > 0.0 => Some(b / a),
                    (Some(_), Some(&b)) => Some(if b == 0.0 { 0.0 } else { f64::INFINITY }),
                    _ => None,
                },
            ),
            None => (false, false, None),
        };
        let passed = match quantity {
            Quantity::Poc => {
                weak && final_ratio.is_none_or(|limit| ratio.is_some_and(|r| r <= limit))
            }
            _ => strict && final_ratio.is_none_or(|limit| ratio.is_some_and(|r| r <= limit)),
        };
        Self {
            quantity,
            t,
            values,
            strictly_decreasing: strict,
            nonincreasing: weak,
            final_over_first: ratio,
            passed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    /// `B_b + (B_d + 2B_h)(max_n E_n(P^n_0) + (e − 1)‖π‖)`.
    pub bound: f64,
    pub max_estimate: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub ns: Vec<u32>,
    pub times: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellReport>,
    pub trends: Vec<TrendCheck>,
    pub lipschitz: Option<LipschitzCheck>,
}

impl SweepReport {
    pub fn row(&self, n: u32, t: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.n == n && r.t == t)
    }

    pub fn trend(&self, quantity: Quantity, t: f64) -> Option<&TrendCheck> {
        self.trends
            .iter()
            .find(|c| c.quantity == quantity && c.t == t)
    }

    pub fn failed_cells(&self) -> impl Iterator<Item = &CellReport> {
        self.cells.iter().filter(|c| c.error.is_some())
    }

    /// True when no cell failed, every trend passed, SSA agreed with the
    /// master solver, and the Lipschitz estimate respected its bound.
    pub fn passed(&self) -> bool {
        self.failed_cells().next().is_none()
            && self.trends.iter().all(|t| t.passed)
            && self.cells.iter().all(|c| c.mc_disagreements.is_empty())
            && self.lipschitz.is_none_or(|l| l.passed)
    }
}

/// The plan's grid: `0` followed by the positive observation times.
fn solver_grid(times: &[f64]) -> Vec<f64> {
    let mut grid = vec![0.0];
    grid.extend(times.iter().cloned().filter(|&t| t > 0.0));
    grid
}

/// The mean-field path on `{0} ∪ times`.
pub fn reference_path<M: RateModel + ?Sized>(plan: &SweepPlan, model: &M) -> Result<MeanFieldPath> {
    integrate_meanfield(
        &plan.u0,
        model,
        &solver_grid(&plan.times),
        plan.meanfield_dt,
    )
}

struct CellOutput {
    report: CellReport,
    rows: Vec<SweepRow>,
    initial_entropy: Option<f64>,
}

fn grid_position(grid: &[f64], t: f64) -> usize {
    grid.iter()
        .position(|&g| g == t)
        .expect("observation time on grid")
}

fn master_cell<M: RateModel + ?Sized>(
    plan: &SweepPlan,
    model: &M,
    reference: &MeanFieldPath,
    n: u32,
    rows: &mut [SweepRow],
    report: &mut CellReport,
) -> Result<f64> {
    let space = model.space();
    let cap = plan.cap_for(n);
    report.k_max = Some(cap);
    let index = StateSpaceIndex::new(space.len(), cap)?;
    let p0 = match plan.initial {
        InitialFamily::Dirac => match dirac_initial_law(&plan.u0, n, space, Some(cap))?.state {
            InitialState::Law(p) => p,
            InitialState::Configuration(_) => unreachable!("cap given"),
        },
        InitialFamily::ProductPoisson => {
            let means: Vec<f64> = plan
                .u0
                .to_measure(space)
                .iter()
                .map(|m| f64::from(n) * m)
                .collect();
            let p = product_poisson(&index, &means)?;
            if p.deficit() > plan.tolerances.truncation {
                return Err(Error::Truncation {
                    deficit: p.deficit(),
                    tolerance: plan.tolerances.truncation,
                });
            }
            p
        }
    };
    let gen = build_generator(model, n, &index)?;
    let pi_n = poisson_reference(n, space, cap, plan.tolerances.truncation)?;
    let grid = &reference.times;
    let path = integrate_fke(
        &p0,
        &gen,
        grid,
        plan.master_dt,
        FkeOptions {
            outflow_tolerance: plan.tolerances.truncation,
        },
    )?;
    let mut lipschitz = 0.0f64;
    for p in &path.dists {
        lipschitz = lipschitz.max(jump_activity(p, &gen)?);
    }
    report.lipschitz_estimate = Some(lipschitz);
    let e0 = scaled_entropy(&path.dists[0], &pi_n, n)?;
    report.initial_gap = Some((e0 - meanfield_energy(&reference.states[0], space)).abs());
    for row in rows.iter_mut() {
        let i = grid_position(grid, row.t);
        let p = &path.dists[i];
        let u = &reference.states[i];
        let entropy = scaled_entropy(p, &pi_n, n)?;
        row.w1_master = Some(expected_tv_distance(p, &u.to_measure(space), n)?);
        row.entropy_n = Some(entropy);
        row.entropy_gap = Some((entropy - row.entropy_limit).abs());
        row.deficit = Some(p.deficit());
        match poc_entropy(p, u, space, n, plan.tolerances.truncation) {
            Ok(v) => row.poc = Some(v),
            Err(e @ Error::Truncation { .. }) => report.poc_skipped.push(PocSkip {
                n,
                t: row.t,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(e0)
}

fn ssa_cell<M: RateModel + ?Sized>(
    plan: &SweepPlan,
    model: &M,
    reference: &MeanFieldPath,
    n: u32,
    rows: &mut [SweepRow],
) -> Result<()> {
    let space = model.space();
    let c0 = match dirac_initial_law(&plan.u0, n, space, None)?.state {
        InitialState::Configuration(c) => c,
        InitialState::Law(_) => unreachable!("no cap given"),
    };
    let opts = EnsembleOptions {
        trajectories: plan.trajectories,
        // Decorrelate the ensembles of different n.
        base_seed: plan.seed ^ (u64::from(n)).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        record_events: false,
    };
    let ensemble = run_ensemble(&c0, model, plan.horizon, &plan.times, &opts)?;
    for (ti, row) in rows.iter_mut().enumerate() {
        let u = &reference.states[grid_position(&reference.times, row.t)];
        row.w1_ssa = Some(w1_to_dirac(&ensemble, ti, u, space)?);
    }
    Ok(())
}

fn run_cell<M: RateModel + ?Sized>(
    plan: &SweepPlan,
    model: &M,
    reference: &MeanFieldPath,
    n: u32,
) -> CellOutput {
    let space = model.space();
    let mut rows: Vec<SweepRow> = plan
        .times
        .iter()
        .map(|&t| SweepRow {
            n,
            t,
            w1_master: None,
            w1_ssa: None,
            entropy_n: None,
            entropy_limit: meanfield_energy(
                &reference.states[grid_position(&reference.times, t)],
                space,
            ),
            entropy_gap: None,
            poc: None,
            deficit: None,
        })
        .collect();
    let mut report = CellReport {
        n,
        k_max: None,
        rounding_error: 0.0,
        initial_gap: None,
        lipschitz_estimate: None,
        mc_disagreements: Vec::new(),
        poc_skipped: Vec::new(),
        master_seconds: None,
        ssa_seconds: None,
        error: None,
    };
    let mut initial_entropy = None;
    let result = (|| -> Result<()> {
        report.rounding_error = dirac_initial_law(&plan.u0, n, space, None)?.rounding_error;
        if plan.mode.master() {
            let start = Instant::now();
            initial_entropy = Some(master_cell(
                plan,
                model,
                reference,
                n,
                &mut rows,
                &mut report,
            )?);
            report.master_seconds = Some(start.elapsed().as_secs_f64());
        }
        if plan.mode.ssa() {
            let start = Instant::now();
            ssa_cell(plan, model, reference, n, &mut rows)?;
            report.ssa_seconds = Some(start.elapsed().as_secs_f64());
        }
        Ok(())
    })();
    if let Err(e) = result {
        report.error = Some(e.to_string());
    }
    for row in &rows {
        if let (Some(exact), Some(est)) = (row.w1_master, row.w1_ssa) {
            if (exact - est.mean).abs() > plan.tolerances.mc_sigmas * est.std_err + 1e-12 {
                report.mc_disagreements.push(row.t);
            }
        }
    }
    CellOutput {
        report,
        rows,
        initial_entropy,
    }
}

/// Runs every cell of the plan. Failures are recorded per cell.
pub fn run_sweep(plan: &SweepPlan) -> Result<SweepReport> {
    plan.validate()?;
    let model = plan.build_model()?;
    run_sweep_with(plan, &model)
}

/// [`run_sweep`] for an arbitrary rate model on the plan's space.
pub fn run_sweep_with<M: RateModel + ?Sized>(plan: &SweepPlan, model: &M) -> Result<SweepReport> {
    plan.validate()?;
    if model.space() != &plan.space {
        return Err(invalid("model and plan live on different site spaces"));
    }
    let reference = reference_path(plan, model)?;
    let cells: Vec<CellOutput> = plan
        .ns
        .par_iter()
        .map(|&n| run_cell(plan, model, &reference, n))
        .collect();

    let mut trends = Vec::new();
    if plan.ns.len() > 1 {
        let column = |f: &dyn Fn(&SweepRow) -> Option<f64>, ti: usize| -> Vec<Option<f64>> {
            cells.iter().map(|c| f(&c.rows[ti])).collect()
        };
        for (ti, &t) in plan.times.iter().enumerate() {
            if plan.mode.master() {
                trends.push(TrendCheck::new(
                    Quantity::W1Master,
                    t,
                    column(&|r| r.w1_master, ti),
                    None,
                ));
                trends.push(TrendCheck::new(
                    Quantity::EntropyGap,
                    t,
                    column(&|r| r.entropy_gap, ti),
                    Some(plan.tolerances.final_ratio),
                ));
                trends.push(TrendCheck::new(
                    Quantity::Poc,
                    t,
                    column(&|r| r.poc, ti),
                    Some(plan.tolerances.final_ratio),
                ));
            }
            if plan.mode.ssa() {
                trends.push(TrendCheck::new(
                    Quantity::W1Ssa,
                    t,
                    column(&|r| r.w1_ssa.map(|e| e.mean), ti),
                    None,
                ));
            }
        }
        if plan.mode.master() && plan.initial == InitialFamily::Dirac {
            trends.push(TrendCheck::new(
                Quantity::InitialGap,
                0.0,
                cells.iter().map(|c| c.report.initial_gap).collect(),
                None,
            ));
        }
    }

    let lipschitz = if plan.mode.master() {
        let entropies: Option<Vec<f64>> = cells.iter().map(|c| c.initial_entropy).collect();
        entropies.map(|e| {
            let b = model.bounds();
            let e_max = e.iter().cloned().fold(0.0f64, f64::max);
            let bound = b.birth_total
                + (b.death + 2.0 * b.hop_total)
                    * (e_max + (std::f64::consts::E - 1.0) * model.space().total_mass());
            let max_estimate = cells
                .iter()
                .filter_map(|c| c.report.lipschitz_estimate)
                .fold(0.0f64, f64::max);
            LipschitzCheck {
                bound,
                max_estimate,
                passed: max_estimate <= bound,
            }
        })
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for c in cells {
        rows.extend(c.rows);
        reports.push(c.report);
    }
    Ok(SweepReport {
        ns: plan.ns.clone(),
        times: plan.times.clone(),
        rows,
        cells: reports,
        trends,
        lipschitz,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PocTable {
    pub ns: Vec<u32>,
    pub times: Vec<f64>,
    /// `values[i][j]` at `ns[i]`, `times[j]`.
    pub values: Vec<Vec<Option<f64>>>,
    pub skipped: Vec<PocSkip>,
    /// Per observation time: the column is nonincreasing in `n`.
    pub nonincreasing: Vec<bool>,
}

/// `(1/n) Ent(P^n_t | Π^n_{ν_t})` across the plan. Needs master mode and a
/// reference density bounded away from zero.
pub fn poc_sweep(plan: &SweepPlan) -> Result<PocTable> {
    plan.validate()?;
    let model = plan.build_model()?;
    poc_sweep_with(plan, &model)
}

pub fn poc_sweep_with<M: RateModel + ?Sized>(plan: &SweepPlan, model: &M) -> Result<PocTable> {
    if !plan.mode.master() {
        return Err(invalid("propagation-of-chaos sweeps need master mode"));
    }
    let reference = reference_path(plan, model)?;
    if let Some(u) = reference.states.iter().find(|u| u.min() <= 0.0) {
        return Err(invalid(format!(
            "reference density touches zero (min {})",
            u.min()
        )));
    }
    let master_only = SweepPlan {
        mode: SweepMode::Master,
        ..plan.clone()
    };
    let cells: Vec<CellOutput> = plan
        .ns
        .par_iter()
        .map(|&n| run_cell(&master_only, model, &reference, n))
        .collect();
    let mut skipped = Vec::new();
    let mut values = Vec::new();
    for c in &cells {
        if let Some(e) = &c.report.error {
            skipped.extend(plan.times.iter().map(|&t| PocSkip {
                n: c.report.n,
                t,
                reason: e.clone(),
            }));
        }
        skipped.extend(c.report.poc_skipped.iter().cloned());
        values.push(c.rows.iter().map(|r| r.poc).collect::<Vec<_>>());
    }
    let nonincreasing = (0..plan.times.len())
        .map(|j| {
            let col: Option<Vec<f64>> = values.iter().map(|v: &Vec<Option<f64>>| v[j]).collect();
            col.is_some_and(|c| c.windows(2).all(|w| w[1] <= w[0]))
        })
        .collect();
    Ok(PocTable {
        ns: plan.ns.clone(),
        times: plan.times.clone(),
        values,
        skipped,
        nonincreasing,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:e}"))
}

/// Writes `n,t,w1_master,w1_ssa,w1_ssa_se,entropy_n,entropy_limit,entropy_gap,poc,deficit`.
/// Missing values are empty fields.
pub fn write_sweep_csv<W: Write>(report: &SweepReport, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "n,t,w1_master,w1_ssa,w1_ssa_se,entropy_n,entropy_limit,entropy_gap,poc,deficit"
    )?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{:e},{},{},{}",
            r.n,
            r.t,
            opt(r.w1_master),
            opt(r.w1_ssa.map(|e| e.mean)),
            opt(r.w1_ssa.map(|e| e.std_err)),
            opt(r.entropy_n),
            r.entropy_limit,
            opt(r.entropy_gap),
            opt(r.poc),
            opt(r.deficit),
        )?;
    }
    Ok(())
}

/// Writes `n,t,poc`, one row per table cell.
pub fn write_poc_csv<W: Write>(table: &PocTable, mut w: W) -> std::io::Result<()> {
    writeln!(w, "n,t,poc")?;
    for (n, vals) in table.ns.iter().zip(&table.values) {
        for (t, v) in table.times.iter().zip(vals) {
            writeln!(w, "{n},{t},{}", opt(*v))?;
        }
    }
    Ok(())
}
