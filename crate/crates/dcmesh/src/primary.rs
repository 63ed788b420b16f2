//! Bounded-integral primary current controller.
//!
//! Each converter runs the nonlinear PI law
//!
//! ```text
//! v̄ = v − k_P·ĩ + r·i_s + M·sin σ
//! ```
//!
//! with the shifted current ĩ = i − i_s. Closed-loop driving dynamics:
//!
//! ```text
//! L·dĩ/dt = −(r + k_P)·ĩ + M·sin σ
//! M·dσ/dt = k_I·(u − ĩ)·cos σ
//! ```
//!
//! The cos σ gate confines σ to [−π/2, π/2], which in turn confines ĩ to
//! ±I_max/2 without anti-windup logic.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::network::ConverterParams;

/// Symmetric saturation of `x` to [−y, y].
pub fn sat(x: f64, y: f64) -> f64 {
    x.clamp(-y, y)
}

/// Converter output of the primary law and its modulation diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlVoltage {
    /// Averaged bridge voltage v̄ (V).
    pub v_bar: f64,
    /// Duty ratio v̄/V_in.
    pub duty: f64,
    /// True when v̄ lies in [0, V_in].
    pub in_range: bool,
}

/// Evaluates the nonlinear PI law at node voltage `v`.
pub fn control_voltage(v: f64, i_tilde: f64, sigma: f64, p: &ConverterParams) -> ControlVoltage {
    let v_bar = v - p.k_p * i_tilde + p.resistance * p.i_s() + p.m() * sigma.sin();
    ControlVoltage { v_bar, duty: v_bar / p.v_in, in_range: (0.0..=p.v_in).contains(&v_bar) }
}

/// Right-hand side (dĩ/dt, dσ/dt) of the driving subsystem.
pub fn primary_rhs(i_tilde: f64, sigma: f64, u: f64, p: &ConverterParams) -> (f64, f64) {
    let m = p.m();
    let di = (-(p.resistance + p.k_p) * i_tilde + m * sigma.sin()) / p.inductance;
    let ds = p.k_i * (u - i_tilde) * sigma.cos() / m;
    (di, ds)
}

/// Jacobian of [`primary_rhs`] with respect to (ĩ, σ, u), row-major 2×3.
pub fn primary_jacobian(i_tilde: f64, sigma: f64, u: f64, p: &ConverterParams) -> [[f64; 3]; 2] {
    let m = p.m();
    let (s, c) = sigma.sin_cos();
    [
        [-(p.resistance + p.k_p) / p.inductance, m * c / p.inductance, 0.0],
        [-p.k_i * c / m, -p.k_i * (u - i_tilde) * s / m, p.k_i * c / m],
    ]
}

/// Equilibrium (ĩ_eq, σ_eq) for a constant reference `u`; both parts
/// saturate, and the arcsin argument is clamped to [−1, 1] first.
pub fn equilibrium(u: f64, p: &ConverterParams) -> (f64, f64) {
    let half = p.half_range();
    let a = (u / half).clamp(-1.0, 1.0);
    (sat(u, half), sat(a.asin(), FRAC_PI_2))
}

/// Lyapunov function of the driving subsystem for reference `u`.
///
/// For |u| < I_max/2 this is the three-term function
///
/// ```text
/// W = ½L(ĩ−u)² + (M²/k_I)(1−a)·ln|M√(1−a²)/cos σ| + (M²/k_I)·a·ln|(1+a)/(1+sin σ)|
/// ```
///
/// with a = 2u/I_max. At |u| = I_max/2 it returns the limiting form
/// ½L(ĩ−u)² + (M²/k_I)·ln|2/(1 + sign(u)·sin σ)|. Its time derivative
/// along trajectories is exactly −(r + k_P)(ĩ − u)².
pub fn lyapunov_w(i_tilde: f64, sigma: f64, u: f64, p: &ConverterParams) -> Result<f64> {
    if !(sigma.abs() < FRAC_PI_2) {
        return Err(Error::Domain(format!(
            "σ = {sigma} lies on or outside the integrator boundary ±π/2"
        )));
    }
    let half = p.half_range();
    if u.abs() > half {
        return Err(Error::Domain(format!("|u| = {} exceeds I_max/2 = {half}", u.abs())));
    }
    let m = p.m();
    let k = m * m / p.k_i;
    let quad = 0.5 * p.inductance * (i_tilde - u) * (i_tilde - u);
    let a = u / half;
    let (s, c) = sigma.sin_cos();
    if a.abs() == 1.0 {
        return Ok(quad + k * (2.0 / (1.0 + a * s)).ln());
    }
    let t1 = (1.0 - a) * (m * (1.0 - a * a).sqrt() / c).abs().ln();
    let t2 = a * ((1.0 + a) / (1.0 + s)).abs().ln();
    Ok(quad + k * (t1 + t2))
}

/// Analytic gradient (∂W/∂ĩ, ∂W/∂σ) of [`lyapunov_w`].
pub fn lyapunov_gradient(i_tilde: f64, sigma: f64, u: f64, p: &ConverterParams) -> (f64, f64) {
    let m = p.m();
    let a = (u / p.half_range()).clamp(-1.0, 1.0);
    let (s, c) = sigma.sin_cos();
    (p.inductance * (i_tilde - u), m * m / p.k_i * (s - a) / c)
}

/// σ̃ = sin σ, the coordinate in which the driving dynamics are polynomial.
pub fn to_polynomial(sigma: f64) -> Result<f64> {
    if !(sigma.abs() <= FRAC_PI_2) {
        return Err(Error::Domain(format!("σ = {sigma} outside [−π/2, π/2]")));
    }
    Ok(sigma.sin())
}

/// Inverse of [`to_polynomial`].
pub fn from_polynomial(sigma_tilde: f64) -> Result<f64> {
    if !(sigma_tilde.abs() <= 1.0) {
        return Err(Error::Domain(format!("σ̃ = {sigma_tilde} outside [−1, 1]")));
    }
    Ok(sigma_tilde.asin())
}

/// Right-hand side (dĩ/dt, dσ̃/dt) in polynomial coordinates:
/// L·dĩ/dt = −(r+k_P)ĩ + M·σ̃ and M·dσ̃/dt = k_I(u − ĩ)(1 − σ̃²).
pub fn polynomial_rhs(i_tilde: f64, sigma_tilde: f64, u: f64, p: &ConverterParams) -> (f64, f64) {
    let m = p.m();
    let di = (-(p.resistance + p.k_p) * i_tilde + m * sigma_tilde) / p.inductance;
    let ds = p.k_i * (u - i_tilde) * (1.0 - sigma_tilde * sigma_tilde) / m;
    (di, ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn node1() -> ConverterParams {
        ConverterParams {
            inductance: 1.8e-3,
            resistance: 0.2,
            capacitance: 2.2e-3,
            v_in: 800.0,
            i_max: 178.7,
            k_p: 2.0,
            k_i: 50.0,
        }
    }

    #[test]
    fn derived_constants() {
        let p = node1();
        assert_eq!(p.i_s(), 89.35);
        assert!((p.m() - 0.5 * 2.2 * 178.7).abs() < 1e-12);
        assert!((p.m() - 196.57).abs() < 1e-9);
    }

    #[test]
    fn control_voltage_at_rest() {
        let p = node1();
        let cv = control_voltage(560.0, 0.0, 0.0, &p);
        assert!((cv.v_bar - 577.87).abs() < 1e-9);
        assert!(cv.in_range);
        assert!((cv.duty - 577.87 / 800.0).abs() < 1e-12);
    }

    #[test]
    fn control_voltage_equilibrium_drop() {
        let p = node1();
        for u in [-60.0, -10.0, 0.0, 25.0, 80.0] {
            let (i, s) = equilibrium(u, &p);
            let cv = control_voltage(560.0, i, s, &p);
            assert!((cv.v_bar - 560.0 - p.resistance * (p.i_s() + u)).abs() < 1e-9);
        }
    }

    #[test]
    fn rhs_values() {
        let p = node1();
        let (i, s) = equilibrium(30.0, &p);
        let (di, ds) = primary_rhs(i, s, 30.0, &p);
        assert!(di.abs() < 1e-9 && ds.abs() < 1e-12);
        let (_, ds) = primary_rhs(10.0, FRAC_PI_2, -50.0, &p);
        assert!(ds.abs() < 1e-12);
        let (di, _) = primary_rhs(0.0, PI / 6.0, 0.0, &p);
        assert!((di - p.m() * 0.5 / 1.8e-3).abs() < 1e-6);
    }

    #[test]
    fn equilibrium_examples() {
        let p = node1();
        let (i, s) = equilibrium(50.0, &p);
        assert_eq!(i, 50.0);
        assert!((s - (100.0_f64 / 178.7).asin()).abs() < 1e-15);
        assert!((s - 0.5940).abs() < 1e-3);
        assert_eq!(equilibrium(100.0, &p), (89.35, FRAC_PI_2));
        assert_eq!(equilibrium(-100.0, &p), (-89.35, -FRAC_PI_2));
        assert_eq!(equilibrium(0.0, &p), (0.0, 0.0));
    }

    #[test]
    fn sat_is_idempotent_and_odd() {
        for x in [-3.0, -1.0, 0.0, 0.5, 7.0] {
            assert_eq!(sat(sat(x, 2.0), 2.0), sat(x, 2.0));
            assert_eq!(sat(-x, 2.0), -sat(x, 2.0));
        }
    }

    #[test]
    fn lyapunov_gradient_vanishes_at_equilibrium() {
        let p = node1();
        for u in [-70.0, -5.0, 0.0, 33.0, 88.0] {
            let (i, s) = equilibrium(u, &p);
            let h = 1e-6;
            let gi = (lyapunov_w(i + h, s, u, &p).unwrap() - lyapunov_w(i - h, s, u, &p).unwrap()) / (2.0 * h);
            let gs = (lyapunov_w(i, s + h, u, &p).unwrap() - lyapunov_w(i, s - h, u, &p).unwrap()) / (2.0 * h);
            let (ai, as_) = lyapunov_gradient(i, s, u, &p);
            assert!(ai.abs() < 1e-12 && as_.abs() < 1e-6);
            // Central differences of a function of size ~M²/k_I carry round-off.
            let scale = p.m() * p.m() / p.k_i;
            assert!(gi.abs() < 1e-9 * scale.max(1.0) && gs.abs() < 1e-9 * scale.max(1.0), "{gi} {gs}");
        }
    }

    #[test]
    fn lyapunov_analytic_gradient_matches_differences() {
        let p = node1();
        let (u, i, s) = (20.0, -13.0, 0.4);
        let h = 1e-5;
        let gi = (lyapunov_w(i + h, s, u, &p).unwrap() - lyapunov_w(i - h, s, u, &p).unwrap()) / (2.0 * h);
        let gs = (lyapunov_w(i, s + h, u, &p).unwrap() - lyapunov_w(i, s - h, u, &p).unwrap()) / (2.0 * h);
        let (ai, as_) = lyapunov_gradient(i, s, u, &p);
        assert!((gi - ai).abs() < 1e-5 * ai.abs().max(1.0));
        assert!((gs - as_).abs() < 1e-5 * as_.abs().max(1.0));
    }

    #[test]
    fn lyapunov_domain_errors() {
        let p = node1();
        assert!(matches!(lyapunov_w(0.0, FRAC_PI_2, 0.0, &p), Err(Error::Domain(_))));
        assert!(matches!(lyapunov_w(0.0, 0.0, 100.0, &p), Err(Error::Domain(_))));
        assert!(lyapunov_w(0.0, 0.3, p.half_range(), &p).is_ok());
        assert!(lyapunov_w(0.0, 0.3, -p.half_range(), &p).is_ok());
    }

    #[test]
    fn limiting_form_is_continuous_in_sigma_gradient() {
        // At u = ±I_max/2 the σ-gradient must still be (M²/k_I)(sin σ − a)/cos σ.
        let p = node1();
        for u in [p.half_range(), -p.half_range()] {
            let (i, s) = (3.0, 0.2);
            let h = 1e-6;
            let gs = (lyapunov_w(i, s + h, u, &p).unwrap() - lyapunov_w(i, s - h, u, &p).unwrap()) / (2.0 * h);
            let (_, as_) = lyapunov_gradient(i, s, u, &p);
            assert!((gs - as_).abs() < 1e-4 * as_.abs().max(1.0), "{gs} vs {as_}");
        }
    }

    #[test]
    fn polynomial_map_round_trip() {
        assert_eq!(to_polynomial(0.0).unwrap(), 0.0);
        assert_eq!(to_polynomial(FRAC_PI_2).unwrap(), 1.0);
        assert!(to_polynomial(2.0).is_err());
        assert!(from_polynomial(1.5).is_err());
        for k in -10..=10 {
            let s = k as f64 * 0.15;
            let back = from_polynomial(to_polynomial(s).unwrap()).unwrap();
            assert!((back - s).abs() < 1e-12);
        }
    }
}
