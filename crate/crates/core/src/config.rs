//! Run configuration shared by the command-line front end.
//!
//! A configuration names the site space and the example-model parameters,
//! then carries one optional block per run kind. Unknown keys are rejected
//! everywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::harness::{InitialFamily, SweepMode, SweepPlan, SweepTolerances};
use crate::master::{
    build_generator, check_reversibility, poisson_reference, ReversibilityReport, StateSpaceIndex,
};
use crate::measure::{DensityField, SiteSpace};
use crate::ode::DtPolicy;
use crate::rates::{
    check_db_n, make_example_model, random_configurations, DbReport, ExampleModelParams, Perturbed,
    RateModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    #[serde(default)]
    pub birth: Vec<f64>,
    #[serde(default)]
    pub death: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateSection {
    pub ns: Vec<u32>,
    /// Random configurations per `n`.
    pub samples: usize,
    /// Per-site count range of the random configurations.
    pub max_count: u32,
    /// Cap of the truncated box used for the generator check.
    pub k_max: u32,
    /// Largest accepted relative violation.
    pub tolerance: f64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            ns: vec![1, 2, 8],
            samples: 200,
            max_count: 10,
            k_max: 10,
            tolerance: 1e-10,
        }
    }
}

fn default_master_dt() -> DtPolicy {
    DtPolicy::adaptive(1e-9)
}

fn default_meanfield_dt() -> DtPolicy {
    DtPolicy::adaptive(1e-10)
}

fn default_trajectories() -> usize {
    1000
}

fn default_outflow() -> f64 {
    1e-6
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsaSection {
    pub n: u32,
    pub u0: Vec<f64>,
    pub horizon: f64,
    /// Snapshot times; 21 evenly spaced points on `[0, horizon]` when absent.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default)]
    pub record_events: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MasterInitial {
    #[default]
    Dirac,
    ProductPoisson,
    /// The truncated Poisson reference `Π^n`; `u0` is ignored.
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasterSection {
    pub n: u32,
    #[serde(default)]
    pub k_max: Option<u32>,
    #[serde(default)]
    pub initial: MasterInitial,
    #[serde(default)]
    pub u0: Option<Vec<f64>>,
    pub horizon: f64,
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    #[serde(default = "default_master_dt")]
    pub dt: DtPolicy,
    #[serde(default = "default_outflow")]
    pub outflow_tolerance: f64,
    /// Write the generator in coordinate format.
    #[serde(default = "default_true")]
    pub export_generator: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanfieldSection {
    pub u0: Vec<f64>,
    pub horizon: f64,
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    #[serde(default = "default_meanfield_dt")]
    pub dt: DtPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub u0: Vec<f64>,
    pub ns: Vec<u32>,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub mode: SweepMode,
    #[serde(default = "default_initial")]
    pub initial: InitialFamily,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default)]
    pub k_max: Option<u32>,
    #[serde(default = "default_master_dt")]
    pub master_dt: DtPolicy,
    #[serde(default = "default_meanfield_dt")]
    pub meanfield_dt: DtPolicy,
    #[serde(default)]
    pub tolerances: SweepTolerances,
}

fn default_initial() -> InitialFamily {
    InitialFamily::Dirac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub space: SiteSpace,
    pub model: ExampleModelParams,
    #[serde(default)]
    pub finite_n_correction: f64,
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub validate: ValidateSection,
    #[serde(default)]
    pub ssa: Option<SsaSection>,
    #[serde(default)]
    pub master: Option<MasterSection>,
    #[serde(default)]
    pub meanfield: Option<MeanfieldSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

/// `count` evenly spaced points on `[0, horizon]`.
pub fn uniform_times(horizon: f64, count: usize) -> Vec<f64> {
    let last = count.max(2) - 1;
    (0..=last)
        .map(|i| horizon * i as f64 / last as f64)
        .collect()
}

fn check_times(times: &[f64], horizon: f64, what: &str) -> Result<()> {
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(invalid(format!(
            "{what}: horizon must be finite and nonnegative"
        )));
    }
    if times.is_empty()
        || times.windows(2).any(|w| w[1] <= w[0])
        || times.iter().any(|&t| !(0.0..=horizon).contains(&t))
    {
        return Err(invalid(format!(
            "{what}: times must be strictly increasing and lie in [0, horizon]"
        )));
    }
    Ok(())
}

fn density(values: &[f64], space: &SiteSpace, what: &str) -> Result<DensityField> {
    if values.len() != space.len() {
        return Err(invalid(format!(
            "{what}: u0 has {} entries for {} sites",
            values.len(),
            space.len()
        )));
    }
    DensityField::new(values.to_vec())
}

impl SsaSection {
    pub fn snapshot_times(&self) -> Vec<f64> {
        self.times
            .clone()
            .unwrap_or_else(|| uniform_times(self.horizon, 21))
    }
}

impl MasterSection {
    pub fn output_times(&self) -> Vec<f64> {
        self.times
            .clone()
            .unwrap_or_else(|| uniform_times(self.horizon, 21))
    }
}

impl MeanfieldSection {
    pub fn output_times(&self) -> Vec<f64> {
        self.times
            .clone()
            .unwrap_or_else(|| uniform_times(self.horizon, 101))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Schema checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        self.build_model()?;
        let space = &self.space;
        let v = &self.validate;
        if v.ns.is_empty() || v.ns.contains(&0) {
            return Err(invalid("validate: ns must be nonempty and positive"));
        }
        if !(v.tolerance >= 0.0 && v.tolerance.is_finite()) || v.k_max == 0 {
            return Err(invalid(
                "validate: tolerance must be nonnegative and k_max positive",
            ));
        }
        if let Some(s) = &self.ssa {
            if s.n == 0 || s.trajectories == 0 {
                return Err(invalid("ssa: n and trajectories must be positive"));
            }
            density(&s.u0, space, "ssa")?;
            check_times(&s.snapshot_times(), s.horizon, "ssa")?;
        }
        if let Some(m) = &self.master {
            if m.n == 0 {
                return Err(invalid("master: n must be positive"));
            }
            match (&m.u0, m.initial) {
                (None, MasterInitial::Dirac | MasterInitial::ProductPoisson) => {
                    return Err(invalid("master: u0 is required for this initial law"))
                }
                (Some(u0), _) => {
                    density(u0, space, "master")?;
                }
                _ => {}
            }
            check_times(&m.output_times(), m.horizon, "master")?;
            if m.output_times()[0] != 0.0 {
                return Err(invalid("master: output times must start at 0"));
            }
            m.dt.validate()?;
            if !(m.outflow_tolerance >= 0.0) {
                return Err(invalid("master: outflow tolerance must be nonnegative"));
            }
        }
        if let Some(m) = &self.meanfield {
            density(&m.u0, space, "meanfield")?;
            check_times(&m.output_times(), m.horizon, "meanfield")?;
            if m.output_times()[0] != 0.0 {
                return Err(invalid("meanfield: output times must start at 0"));
            }
            m.dt.validate()?;
        }
        if self.sweep.is_some() {
            self.sweep_plan()?.validate()?;
        }
        Ok(())
    }

    /// The example model, wrapped with the configured perturbation if any.
    pub fn build_model(&self) -> Result<Box<dyn RateModel>> {
        let model = make_example_model(self.model.clone(), self.space.clone())?
            .with_finite_n_correction(self.finite_n_correction)?;
        Ok(match &self.perturbation {
            None => Box::new(model),
            Some(p) => {
                let s = self.space.len();
                let fill = |v: &[f64]| {
                    if v.is_empty() {
                        vec![0.0; s]
                    } else {
                        v.to_vec()
                    }
                };
                Box::new(Perturbed::new(model, fill(&p.birth), fill(&p.death))?)
            }
        })
    }

    pub fn sweep_plan(&self) -> Result<SweepPlan> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| invalid("config has no sweep block"))?;
        Ok(SweepPlan {
            space: self.space.clone(),
            model: self.model.clone(),
            finite_n_correction: self.finite_n_correction,
            u0: density(&s.u0, &self.space, "sweep")?,
            ns: s.ns.clone(),
            horizon: s.horizon,
            times: s.times.clone(),
            mode: s.mode,
            initial: s.initial,
            trajectories: s.trajectories,
            k_max: s.k_max,
            seed: self.seed,
            master_dt: s.master_dt,
            meanfield_dt: s.meanfield_dt,
            tolerances: s.tolerances,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub n: u32,
    pub db: DbReport,
    pub reversibility: ReversibilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub entries: Vec<ValidationEntry>,
    pub max_db_violation: f64,
    pub max_reversibility_violation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks the finite-`n` detailed-balance identities on random
/// configurations and the reversibility of the truncated generator
/// against `Π^n`, for every `n` in the validate block. Violations are
/// relative.
pub fn run_validation(config: &RunConfig) -> Result<ValidationReport> {
    let model = config.build_model()?;
    let v = &config.validate;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::with_capacity(v.ns.len());
    for &n in &v.ns {
        let samples = random_configurations(&config.space, n, v.samples, v.max_count, &mut rng);
        let db = check_db_n(&model, &samples, n)?;
        let index = StateSpaceIndex::new(config.space.len(), v.k_max)?;
        let gen = build_generator(&model, n, &index)?;
        // Reversibility is insensitive to renormalizing the truncated reference.
        let reference = poisson_reference(n, &config.space, v.k_max, 1.0)?;
        let reversibility = check_reversibility(&gen, &reference)?;
        entries.push(ValidationEntry {
            n,
            db,
            reversibility,
        });
    }
    let max_db = entries.iter().fold(0.0f64, |m, e| m.max(e.db.max_rel));
    let max_rev = entries
        .iter()
        .fold(0.0f64, |m, e| m.max(e.reversibility.max_rel));
    Ok(ValidationReport {
        entries,
        max_db_violation: max_db,
        max_reversibility_violation: max_rev,
        tolerance: v.tolerance,
        passed: max_db <= v.tolerance && max_rev <= v.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "space": {"coords": [0.0, 1.0], "weights": [0.5, 0.5]},
        "model": {
            "psi_bd": {"kind": "sigmoid", "low": 0.4, "high": 1.6, "steepness": -2.0, "midpoint": 0.5},
            "psi_h": {"kind": "reciprocal", "scale": 0.8, "rate": 0.7},
            "competition": {"kind": "gaussian", "amplitude": 1.2, "width": 0.6},
            "hop_kernel": {"kind": "gaussian", "amplitude": 1.0, "width": 0.8}
        }
    }"#;

    fn with(extra: &str) -> String {
        let mut v: serde_json::Value = serde_json::from_str(BASE).unwrap();
        let e: serde_json::Value = serde_json::from_str(extra).unwrap();
        for (k, x) in e.as_object().unwrap() {
            v[k] = x.clone();
        }
        v.to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = RunConfig::from_json(BASE).unwrap();
        assert_eq!(c.validate, ValidateSection::default());
        assert!(c.ssa.is_none() && c.sweep.is_none());
        assert_eq!(c.seed, 0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(&with(r#"{"bogus": 1}"#)).is_err());
        assert!(RunConfig::from_json(&with(
            r#"{"meanfield": {"u0": [1, 1], "horizon": 1, "stepsize": 0.1}}"#
        ))
        .is_err());
        assert!(RunConfig::from_json(&with(r#"{"validate": {"n": [1]}}"#)).is_err());
    }

    #[test]
    fn section_checks() {
        assert!(
            RunConfig::from_json(&with(r#"{"meanfield": {"u0": [1], "horizon": 1}}"#)).is_err()
        );
        assert!(RunConfig::from_json(&with(r#"{"master": {"n": 4, "horizon": 1}}"#)).is_err());
        RunConfig::from_json(&with(
            r#"{"master": {"n": 4, "horizon": 1, "initial": "stationary"}}"#,
        ))
        .unwrap();
        assert!(RunConfig::from_json(&with(
            r#"{"ssa": {"n": 4, "u0": [1, 1], "horizon": 1, "times": [0.5, 0.2]}}"#
        ))
        .is_err());
        assert!(RunConfig::from_json(&with(
            r#"{"sweep": {"u0": [1, 1], "ns": [8, 4], "horizon": 1, "times": [1], "mode": "master"}}"#
        ))
        .is_err());
    }

    #[test]
    fn uniform_time_grid() {
        assert_eq!(uniform_times(2.0, 5), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn example_model_validates() {
        let c = RunConfig::from_json(BASE).unwrap();
        let r = run_validation(&c).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.entries.len(), 3);
    }

    #[test]
    fn perturbed_model_fails_validation() {
        let c = RunConfig::from_json(&with(r#"{"perturbation": {"birth": [0.05, 0.0]}}"#)).unwrap();
        let r = run_validation(&c).unwrap();
        assert!(!r.passed);
        assert!(r.max_db_violation > 1e-3);
        assert!(r.max_reversibility_violation > 1e-3);
    }
}
