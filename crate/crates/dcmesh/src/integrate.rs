//! Classical fixed-step fourth-order Runge–Kutta integration.
//!
//! Fixed steps keep every run bit-reproducible and make per-step monitors
//! (Lyapunov decrease, constraint slack) well defined.

use crate::error::{Error, Result};

/// Reusable RK4 stage buffers for systems of a fixed dimension.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Rk4 {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `y` in place by one step of size `h` from time `t`.
    pub fn step<F>(&mut self, f: &mut F, t: f64, y: &mut [f64], h: f64) -> Result<()>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    {
        let n = y.len();
        f(t, y, &mut self.k1)?;
        for j in 0..n {
            self.tmp[j] = y[j] + 0.5 * h * self.k1[j];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k2)?;
        for j in 0..n {
            self.tmp[j] = y[j] + 0.5 * h * self.k2[j];
        }
        f(t + 0.5 * h, &self.tmp, &mut self.k3)?;
        for j in 0..n {
            self.tmp[j] = y[j] + h * self.k3[j];
        }
        f(t + h, &self.tmp, &mut self.k4)?;
        for j in 0..n {
            y[j] += h / 6.0 * (self.k1[j] + 2.0 * self.k2[j] + 2.0 * self.k3[j] + self.k4[j]);
        }
        Ok(())
    }
}

/// Number of steps and the final partial step used to cover [t0, t1].
/// Steps that fall within 1e−9·h of the end are merged into the last one.
pub fn step_plan(t0: f64, t1: f64, h: f64) -> (usize, f64) {
    let span = t1 - t0;
    let full = (span / h * (1.0 + 1e-12)).floor();
    let rest = span - full * h;
    if rest <= 1e-9 * h {
        (full as usize, 0.0)
    } else {
        (full as usize, rest)
    }
}

/// Integrates `y' = f(t, y)` from `t0` to `t1` with step `h` (the last step
/// may be shorter). Returns the final state, or a divergence error with the
/// last finite state.
pub fn integrate_interval<F>(y0: &[f64], mut f: F, t0: f64, t1: f64, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if !(t1 > t0) || !(h > 0.0) {
        return Err(Error::Parameter(format!("invalid interval [{t0}, {t1}] with step {h}")));
    }
    let mut rk = Rk4::new(y0.len());
    let mut y = y0.to_vec();
    let (steps, rest) = step_plan(t0, t1, h);
    let mut t = t0;
    let mut last = y.clone();
    for k in 0..=steps {
        let dt = if k < steps { h } else { rest };
        if dt == 0.0 {
            break;
        }
        rk.step(&mut f, t, &mut y, dt)?;
        t = if k + 1 == steps && rest == 0.0 { t1 } else { t + dt };
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { t, last_finite: last });
        }
        last.copy_from_slice(&y);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rhs_keeps_state() {
        let y = integrate_interval(&[1.0, -2.0], |_, _, d| {
            d.fill(0.0);
            Ok(())
        }, 0.0, 1.0, 0.1)
        .unwrap();
        assert_eq!(y, vec![1.0, -2.0]);
    }

    #[test]
    fn exponential_decay() {
        let y = integrate_interval(&[1.0], |_, y, d| {
            d[0] = -y[0];
            Ok(())
        }, 0.0, 1.0, 1e-4)
        .unwrap();
        assert!((y[0] - (-1.0_f64).exp()).abs() < 1e-9);
        assert!((y[0] - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn partial_last_step() {
        let (n, rest) = step_plan(0.0, 1.05, 0.1);
        assert_eq!(n, 10);
        assert!((rest - 0.05).abs() < 1e-12);
        let y = integrate_interval(&[0.0], |_, _, d| {
            d[0] = 1.0;
            Ok(())
        }, 0.0, 1.05, 0.1)
        .unwrap();
        assert!((y[0] - 1.05).abs() < 1e-12);
    }

    #[test]
    fn divergence_reports_last_state() {
        let err = integrate_interval(&[1.0], |_, y, d| {
            d[0] = y[0] * 1e200;
            Ok(())
        }, 0.0, 1.0, 0.5)
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }
}
