//! Explicit time integrators shared by the master and mean-field solvers.
//!
//! Classical RK4 on a fixed step, and the Dormand–Prince 5(4) embedded pair
//! with standard step-size control. Both land exactly on every requested
//! output time.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// How the step size is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DtPolicy {
    /// RK4 with the given step.
    Fixed { dt: f64 },
    /// RK4 with `dt = min(0.01, 0.1 / max_rate)`.
    Auto,
    /// Dormand–Prince 5(4) with mixed error control.
    Adaptive { rtol: f64, atol: f64 },
}

impl Default for DtPolicy {
    fn default() -> Self {
        DtPolicy::Auto
    }
}

impl DtPolicy {
    pub fn adaptive(rtol: f64) -> Self {
        DtPolicy::Adaptive { rtol, atol: 1e-14 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DtPolicy::Fixed { dt } if !(dt > 0.0 && dt.is_finite()) => {
                Err(invalid(format!("fixed dt must be positive, got {dt}")))
            }
            DtPolicy::Adaptive { rtol, atol }
                if !(rtol > 0.0 && rtol.is_finite() && atol > 0.0 && atol.is_finite()) =>
            {
                Err(invalid("adaptive tolerances must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Fixed step implied by this policy, `None` for adaptive integration.
    pub fn fixed_step(&self, max_rate: f64) -> Option<f64> {
        match *self {
            DtPolicy::Fixed { dt } => Some(dt),
            DtPolicy::Auto => Some(if max_rate > 0.0 {
                (0.1 / max_rate).min(0.01)
            } else {
                0.01
            }),
            DtPolicy::Adaptive { .. } => None,
        }
    }
}

/// What to do when a step produces a component below `-1e-12`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positivity {
    Ignore,
    /// Fail with [`Error::Negativity`].
    Abort,
    /// Reject the step and retry with half the step size.
    Reject,
}

pub const NEGATIVITY_TOL: f64 = -1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OdeStats {
    pub steps: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub stats: OdeStats,
}

#[derive(Debug, Clone, Copy)]
pub struct Integrator {
    pub policy: DtPolicy,
    pub positivity: Positivity,
    /// Only the first `checked` components are subject to the positivity rule.
    pub checked: usize,
    pub max_halvings: u32,
}

impl Integrator {
    pub fn new(policy: DtPolicy, positivity: Positivity) -> Self {
        Self {
            policy,
            positivity,
            checked: usize::MAX,
            max_halvings: 40,
        }
    }

    pub fn checked_prefix(mut self, checked: usize) -> Self {
        self.checked = checked;
        self
    }

    /// Integrates `y' = f(t, y)` from `times[0]` and records `y` at each entry
    /// of `times`, which must be nondecreasing. `max_rate` feeds [`DtPolicy::Auto`].
    pub fn solve<F>(
        &self,
        mut f: F,
        y0: Vec<f64>,
        times: &[f64],
        max_rate: f64,
    ) -> Result<OdeSolution>
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        self.policy.validate()?;
        if times.is_empty() {
            return Err(invalid("at least one output time is required"));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("output times must be finite and nondecreasing"));
        }
        if y0.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { time: times[0] });
        }
        let mut stats = OdeStats::default();
        let mut states = Vec::with_capacity(times.len());
        states.push(y0.clone());
        let mut y = y0;
        let mut ws = Workspace::new(y.len());
        match self.policy.fixed_step(max_rate) {
            Some(dt) => {
                for w in times.windows(2) {
                    let (t0, t1) = (w[0], w[1]);
                    let span = t1 - t0;
                    if span > 0.0 {
                        let steps = (span / dt - 1e-9).ceil().max(1.0) as usize;
                        let h = span / steps as f64;
                        for i in 0..steps {
                            let t = t0 + i as f64 * h;
                            self.rk4_advance(&mut f, t, &mut y, h, 0, &mut ws, &mut stats)?;
                        }
                    }
                    states.push(y.clone());
                }
            }
            None => {
                let DtPolicy::Adaptive { rtol, atol } = self.policy else {
                    unreachable!()
                };
                let mut dp = DormandPrince::new(rtol, atol, y.len());
                for w in times.windows(2) {
                    if w[1] > w[0] {
                        dp.advance(self, &mut f, w[0], w[1], &mut y, &mut stats)?;
                    }
                    states.push(y.clone());
                }
            }
        }
        Ok(OdeSolution {
            times: times.to_vec(),
            states,
            stats,
        })
    }

    fn check(&self, t: f64, y: &[f64]) -> std::result::Result<(), Error> {
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { time: t });
        }
        if self.positivity == Positivity::Ignore {
            return Ok(());
        }
        let limit = self.checked.min(y.len());
        if let Some(i) = y[..limit].iter().position(|&x| x < NEGATIVITY_TOL) {
            return Err(Error::Negativity {
                time: t,
                index: i,
                value: y[i],
            });
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn rk4_advance<F>(
        &self,
        f: &mut F,
        t: f64,
        y: &mut Vec<f64>,
        h: f64,
        depth: u32,
        ws: &mut Workspace,
        stats: &mut OdeStats,
    ) -> Result<()>
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        rk4_step(f, t, y, h, ws);
        stats.rhs_evals += 4;
        match self.check(t + h, &ws.out) {
            Ok(()) => {
                stats.steps += 1;
                std::mem::swap(y, &mut ws.out);
                Ok(())
            }
            Err(Error::Negativity { .. }) if self.positivity == Positivity::Reject => {
                stats.rejected += 1;
                if depth >= self.max_halvings {
                    return Err(Error::StepUnderflow { time: t });
                }
                let half = 0.5 * h;
                self.rk4_advance(f, t, y, half, depth + 1, ws, stats)?;
                self.rk4_advance(f, t + half, y, half, depth + 1, ws, stats)
            }
            Err(e) => Err(e),
        }
    }
}

struct Workspace {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    out: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            out: vec![0.0; n],
        }
    }
}

fn rk4_step<F>(f: &mut F, t: f64, y: &[f64], h: f64, ws: &mut Workspace)
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let [k1, k2, k3, k4] = &mut ws.k;
    let tmp = &mut ws.tmp;
    f(t, y, k1);
    for i in 0..y.len() {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(t + 0.5 * h, tmp, k2);
    for i in 0..y.len() {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, tmp, k3);
    for i in 0..y.len() {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, tmp, k4);
    for i in 0..y.len() {
        ws.out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// Fifth-order weights equal the last row of A; E = b5 − b4.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct DormandPrince {
    rtol: f64,
    atol: f64,
    h: Option<f64>,
    k: Vec<Vec<f64>>,
    fsal_valid: bool,
    tmp: Vec<f64>,
    y_new: Vec<f64>,
}

impl DormandPrince {
    fn new(rtol: f64, atol: f64, n: usize) -> Self {
        Self {
            rtol,
            atol,
            h: None,
            k: vec![vec![0.0; n]; 7],
            fsal_valid: false,
            tmp: vec![0.0; n],
            y_new: vec![0.0; n],
        }
    }

    fn initial_step(&self, y: &[f64], f0: &[f64], span: f64) -> f64 {
        let mut d0 = 0.0f64;
        let mut d1 = 0.0f64;
        for (yi, fi) in y.iter().zip(f0) {
            let sc = self.atol + self.rtol * yi.abs();
            d0 = d0.max(yi.abs() / sc);
            d1 = d1.max(fi.abs() / sc);
        }
        let h = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        h.min(span)
    }

    fn advance<F>(
        &mut self,
        integ: &Integrator,
        f: &mut F,
        t0: f64,
        t1: f64,
        y: &mut Vec<f64>,
        stats: &mut OdeStats,
    ) -> Result<()>
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        let mut t = t0;
        if !self.fsal_valid {
            f(t, y, &mut self.k[0]);
            stats.rhs_evals += 1;
            self.fsal_valid = true;
        }
        let mut h = match self.h {
            Some(h) => h,
            None => self.initial_step(y, &self.k[0], t1 - t0),
        };
        let min_h = 1e-14 * t1.abs().max(1.0);
        while t < t1 {
            let last = t1 - (t + h) < min_h;
            let step = if last { t1 - t } else { h };
            for stage in 1..7 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..stage {
                        acc += A[stage][j] * self.k[j][i];
                    }
                    self.tmp[i] = y[i] + step * acc;
                }
                f(t + C[stage] * step, &self.tmp, &mut self.k[stage]);
            }
            stats.rhs_evals += 6;
            // Stage 7 is evaluated at the fifth-order solution (FSAL).
            self.y_new.copy_from_slice(&self.tmp);
            let mut err = 0.0f64;
            for i in 0..n {
                let mut e = 0.0;
                for j in 0..7 {
                    e += E[j] * self.k[j][i];
                }
                let sc = self.atol + self.rtol * y[i].abs().max(self.y_new[i].abs());
                err = err.max((step * e).abs() / sc);
            }
            if !err.is_finite() {
                err = f64::INFINITY;
            }
            let negative = integ.positivity != Positivity::Ignore
                && self.y_new[..integ.checked.min(n)]
                    .iter()
                    .any(|&x| x < NEGATIVITY_TOL);
            if err <= 1.0 && !(negative && integ.positivity == Positivity::Reject) {
                integ.check(t + step, &self.y_new)?;
                t = if last { t1 } else { t + step };
                std::mem::swap(y, &mut self.y_new);
                self.k.swap(0, 6);
                stats.steps += 1;
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                // A step shortened to hit an output time does not shrink the next one.
                if !last || step >= h {
                    h = step * factor;
                }
            } else {
                stats.rejected += 1;
                let factor = if negative && err <= 1.0 {
                    0.5
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.1, 0.5)
                };
                h = step * factor;
                if h < min_h {
                    return Err(Error::StepUnderflow { time: t });
                }
            }
        }
        self.h = Some(h);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn decay(_t: f64, y: &[f64], dy: &mut [f64]) {
        dy[0] = -y[0];
        dy[1] = y[0] - 0.5 * y[1];
    }

    fn exact(t: f64) -> [f64; 2] {
        // y0 = (1, 0): y1 = e^{-t}, y2 = 2(e^{-t/2} − e^{-t})
        [(-t).exp(), 2.0 * ((-0.5 * t).exp() - (-t).exp())]
    }

    #[test]
    fn rk4_is_fourth_order() {
        let times = [0.0, 1.0, 2.0];
        let err = |dt: f64| {
            let sol = Integrator::new(DtPolicy::Fixed { dt }, Positivity::Ignore)
                .solve(decay, vec![1.0, 0.0], &times, 0.0)
                .unwrap();
            let ex = exact(2.0);
            (sol.states[2][0] - ex[0]).abs() + (sol.states[2][1] - ex[1]).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((14.0..18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn adaptive_meets_tolerance_and_hits_output_times() {
        let times = [0.0, 0.3, 0.7, 0.7, 2.5];
        let sol = Integrator::new(DtPolicy::adaptive(1e-10), Positivity::Abort)
            .solve(decay, vec![1.0, 0.0], &times, 0.0)
            .unwrap();
        for (t, y) in sol.times.iter().zip(&sol.states) {
            let ex = exact(*t);
            assert_relative_eq!(y[0], ex[0], max_relative = 1e-8);
            assert_relative_eq!(y[1], ex[1], epsilon = 1e-9);
        }
        assert!(sol.stats.steps > 0);
    }

    #[test]
    fn auto_step_follows_rate_scale() {
        assert_eq!(DtPolicy::Auto.fixed_step(0.0), Some(0.01));
        assert_eq!(DtPolicy::Auto.fixed_step(100.0), Some(0.001));
        assert_eq!(DtPolicy::adaptive(1e-8).fixed_step(1.0), None);
    }

    #[test]
    fn negative_step_aborts_or_rejects() {
        // A cascade with a defective matrix: RK4 with hλ = −5 drives y[1] negative.
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = -50.0 * y[0];
            dy[1] = 50.0 * y[0] - 50.0 * y[1];
        };
        let abort = Integrator::new(DtPolicy::Fixed { dt: 0.1 }, Positivity::Abort).solve(
            f,
            vec![1.0, 0.0],
            &[0.0, 1.0],
            0.0,
        );
        assert!(matches!(abort, Err(Error::Negativity { .. })));

        let sol = Integrator::new(DtPolicy::Fixed { dt: 0.1 }, Positivity::Reject)
            .solve(f, vec![1.0, 0.0], &[0.0, 1.0], 0.0)
            .unwrap();
        assert!(sol.stats.rejected > 0);
        assert!(sol.states[1].iter().all(|&x| x >= 0.0 && x < 1e-10));
    }

    #[test]
    fn rejects_bad_times() {
        let integ = Integrator::new(DtPolicy::Auto, Positivity::Ignore);
        assert!(integ
            .solve(decay, vec![1.0, 0.0], &[1.0, 0.5], 0.0)
            .is_err());
        assert!(integ.solve(decay, vec![1.0, 0.0], &[], 0.0).is_err());
    }
}
