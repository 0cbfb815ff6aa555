//! The `cosh` Legendre pair and the action density built from it.
//!
//! `ψ*(z) = 2(cosh(z/2) − 1)` and its convex conjugate
//! `ψ(s) = 2s·asinh(s) − 2√(1+s²) + 2`. The action density
//! `Υ(w, u, v) = ψ(w/√(uv))·√(uv)` prices a net flux `w` against forward and
//! backward intensities `u`, `v`; it is jointly convex and 1-homogeneous.
//!
//! All formulas are written in cancellation-free forms so that the Legendre
//! equality holds to a few ulps even for tiny fluxes.

use serde::{Deserialize, Serialize};

/// `ψ*(z) = 2(cosh(z/2) − 1) = 4 sinh²(z/4)`.
#[inline]
pub fn psi_star(z: f64) -> f64 {
    let s = (0.25 * z).sinh();
    4.0 * s * s
}

/// Derivative of `ψ*`: `sinh(z/2)`.
#[inline]
pub fn psi_star_prime(z: f64) -> f64 {
    (0.5 * z).sinh()
}

/// Legendre dual of [`psi_star`].
#[inline]
pub fn psi(s: f64) -> f64 {
    if !s.is_finite() {
        return f64::INFINITY;
    }
    // −2√(1+s²) + 2 = −2s² / (1 + √(1+s²)), rewritten to avoid overflow in s².
    let a = s.abs();
    2.0 * a * a.asinh() - 2.0 * a * (a / (1.0 + a.hypot(1.0)))
}

/// `Υ(w, u, v)`: zero for `w = 0`, `ψ(w/√(uv))√(uv)` for `u, v > 0`, `+∞` otherwise.
pub fn upsilon(w: f64, u: f64, v: f64) -> f64 {
    debug_assert!(u >= 0.0 && v >= 0.0, "intensities must be nonnegative");
    if w == 0.0 {
        return 0.0;
    }
    if u <= 0.0 || v <= 0.0 {
        return f64::INFINITY;
    }
    let a = w.abs();
    let g = u.sqrt() * v.sqrt();
    let ratio = a / g;
    if g > 0.0 && ratio.is_finite() {
        // ψ(a/g)·g = 2a·asinh(a/g) − 2a² / (g + √(g² + a²))
        2.0 * a * ratio.asinh() - 2.0 * a * (a / (g + g.hypot(a)))
    } else {
        // √(uv) underflowed: asinh(a/g) ≈ ln(2a) − ½(ln u + ln v).
        let log_g = 0.5 * (u.ln() + v.ln());
        2.0 * a * ((2.0 * a).ln() - log_g) - 2.0 * a
    }
}

/// Squared Hellinger distance `½ Σ (√μ_i − √ν_i)²`.
pub fn hellinger_sq(mu: &[f64], nu: &[f64]) -> f64 {
    assert_eq!(mu.len(), nu.len(), "hellinger_sq: length mismatch");
    0.5 * mu
        .iter()
        .zip(nu)
        .map(|(&a, &b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum::<f64>()
}

/// One point `(w, u, v, ζ)` of the flux/force duality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualPairSample {
    pub w: f64,
    pub u: f64,
    pub v: f64,
    pub zeta: f64,
}

impl DualPairSample {
    /// The flux on the optimal manifold for the given intensities and force.
    pub fn optimal(u: f64, v: f64, zeta: f64) -> Self {
        let w = (u.sqrt() * v.sqrt()) * psi_star_prime(zeta);
        Self { w, u, v, zeta }
    }
}

/// `Υ(w,u,v) + ψ*(ζ)√(uv) − wζ`, nonnegative by Young's inequality.
pub fn dual_gap(sample: DualPairSample) -> f64 {
    let DualPairSample { w, u, v, zeta } = sample;
    let g = u.sqrt() * v.sqrt();
    upsilon(w, u, v) + psi_star(zeta) * g - w * zeta
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    // Numerical Legendre transform: golden-section search of z ↦ sz − ψ*(z).
    fn legendre_oracle(s: f64) -> f64 {
        let f = |z: f64| s * z - 2.0 * ((z / 2.0).cosh() - 1.0);
        let (mut a, mut b) = (-60.0f64, 60.0f64);
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        f(0.5 * (a + b))
    }

    #[test]
    fn psi_star_examples() {
        assert_eq!(psi_star(0.0), 0.0);
        assert_relative_eq!(psi_star(2.0), 2.0 * (1f64.cosh() - 1.0), epsilon = 1e-15);
        assert_eq!(psi_star(1.7), psi_star(-1.7));
    }

    #[test]
    fn psi_examples() {
        assert_eq!(psi(0.0), 0.0);
        let closed = 2.0 * 1f64.asinh() - 2.0 * 2f64.sqrt() + 2.0;
        assert_relative_eq!(psi(1.0), closed, epsilon = 1e-15);
        assert_relative_eq!(psi(1.0), legendre_oracle(1.0), epsilon = 1e-9);
        // small-s regime where the naive formula cancels: ψ(s) = s² − s⁴/12 + …
        let s = 1e-6;
        assert_relative_eq!(psi(s), s * s - s.powi(4) / 12.0, max_relative = 1e-14);
    }

    #[test]
    fn psi_matches_numerical_legendre() {
        for i in 0..41 {
            let s = -10.0 + 0.5 * i as f64;
            assert!((psi(s) - legendre_oracle(s)).abs() <= 1e-6, "s = {s}");
        }
    }

    #[test]
    fn upsilon_examples() {
        assert_eq!(upsilon(0.0, 0.0, 0.0), 0.0);
        assert_eq!(upsilon(1.0, 0.0, 1.0), f64::INFINITY);
        assert_eq!(upsilon(-1.0, 1.0, 0.0), f64::INFINITY);
        let (w, u, v) = (0.7, 1.3, 0.4);
        let lam = 3.7;
        assert_relative_eq!(
            upsilon(lam * w, lam * u, lam * v),
            lam * upsilon(w, u, v),
            max_relative = 1e-10
        );
        assert_eq!(upsilon(w, u, v), upsilon(w, v, u));
    }

    #[test]
    fn upsilon_tiny_intensities_stay_finite() {
        let val = upsilon(1e-3, 1e-200, 1e-200);
        assert!(val.is_finite() && val > 0.0);
        let underflow = upsilon(1e-3, 1e-320, 1e-320);
        assert!(underflow.is_finite() && underflow > val);
    }

    #[test]
    fn hellinger_examples() {
        assert_eq!(hellinger_sq(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(hellinger_sq(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(hellinger_sq(&[4.0], &[1.0]), 0.5);
    }

    #[test]
    fn dual_gap_examples() {
        let zero = DualPairSample {
            w: 0.0,
            u: 1.0,
            v: 2.0,
            zeta: 0.0,
        };
        assert_eq!(dual_gap(zero), 0.0);
        let opt = DualPairSample::optimal(0.8, 2.5, -1.3);
        assert!(dual_gap(opt).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn young_inequality(w in -20.0..20.0f64, u in 1e-6..10.0f64, v in 1e-6..10.0f64, zeta in -8.0..8.0f64) {
            let gap = dual_gap(DualPairSample { w, u, v, zeta });
            prop_assert!(gap >= -1e-12);
        }

        #[test]
        fn equality_on_optimal_manifold(u in 1e-6..10.0f64, v in 1e-6..10.0f64, zeta in -8.0..8.0f64) {
            prop_assert!(dual_gap(DualPairSample::optimal(u, v, zeta)).abs() <= 1e-8);
        }

        #[test]
        fn upsilon_convex(
            a in (-5.0..5.0f64, 0.0..5.0f64, 0.0..5.0f64),
            b in (-5.0..5.0f64, 0.0..5.0f64, 0.0..5.0f64),
            t in 0.01..0.99f64,
        ) {
            let mix = (t * a.0 + (1.0 - t) * b.0, t * a.1 + (1.0 - t) * b.1, t * a.2 + (1.0 - t) * b.2);
            let lhs = upsilon(mix.0, mix.1, mix.2);
            let rhs = t * upsilon(a.0, a.1, a.2) + (1.0 - t) * upsilon(b.0, b.1, b.2);
            prop_assert!(lhs <= rhs + 1e-10 || rhs.is_infinite());
        }

        #[test]
        fn upsilon_symmetric_and_homogeneous(w in -5.0..5.0f64, u in 0.0..5.0f64, v in 0.0..5.0f64, lam in 0.01..50.0f64) {
            prop_assert_eq!(upsilon(w, u, v), upsilon(w, v, u));
            let a = upsilon(lam * w, lam * u, lam * v);
            let b = lam * upsilon(w, u, v);
            prop_assert!(a == b || (a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }

        #[test]
        fn legendre_consistency(s in -20.0..20.0f64, z in -8.0..8.0f64) {
            prop_assert!(psi(s) + psi_star(z) >= s * z - 1e-12);
            let s_opt = psi_star_prime(z);
            let gap = psi(s_opt) + psi_star(z) - s_opt * z;
            prop_assert!(gap.abs() <= 1e-8);
        }

        #[test]
        fn hellinger_bounded(mu in prop::collection::vec(0.0..3.0f64, 4), nu in prop::collection::vec(0.0..3.0f64, 4)) {
            let bound = 0.5 * (mu.iter().sum::<f64>() + nu.iter().sum::<f64>());
            prop_assert!(hellinger_sq(&mu, &nu) <= bound + 1e-12);
        }
    }
}
