//! Per-node receding-horizon voltage controller.
//!
//! Each node predicts its own state x = (v, ĩ, σ) with the local model
//!
//! ```text
//! C·dv/dt = −g(v)·d̄ + i_s + ĩ − ℒ_ii·v + w
//! L·dĩ/dt = −(r + k_P)·ĩ + M·sin σ
//! M·dσ/dt = k_I·(u − ĩ)·cos σ
//! ```
//!
//! where w = −Σ_{j≠i} ℒ_ij·v_j is the current pushed in by the neighbours,
//! measured once per sample and held constant over the horizon. The node
//! computes its steady-state target, builds a box terminal set around the
//! local equilibrium and solves a direct-transcription optimal control
//! problem by sequential quadratic programming. Only the first input is
//! applied; the rest seeds the next solve.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ConverterParams, Zip};
use crate::primary;

/// Everything one node knows about its own dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalModel {
    pub params: ConverterParams,
    /// Diagonal Laplacian entry ℒ_ii (S).
    pub l_ii: f64,
    /// Nominal load d̄.
    pub nominal: Zip,
    /// Admissible voltage band [V_min, V_max].
    pub v_bounds: (f64, f64),
    /// Constant-power cutoff voltage.
    pub v_min_load: f64,
}

/// Local state (v, ĩ, σ).
pub type LocalState = [f64; 3];

/// ∂x_k/∂u_j for every knot k.
type Sensitivities = Vec<Vec<[f64; 3]>>;

impl LocalModel {
    /// Local right-hand side with constant reference `u` and neighbour current `w`.
    pub fn rhs(&self, x: &LocalState, u: f64, w: f64) -> Result<LocalState> {
        let p = &self.params;
        if self.nominal.power > 0.0 && x[0] <= self.v_min_load {
            return Err(Error::Singularity { v: x[0], cutoff: self.v_min_load });
        }
        let dv = (-self.nominal.current_at(x[0]) + p.i_s() + x[1] - self.l_ii * x[0] + w) / p.capacitance;
        let (di, ds) = primary::primary_rhs(x[1], x[2], u, p);
        Ok([dv, di, ds])
    }

    /// Jacobians ∂f/∂x (3×3) and ∂f/∂u (3).
    fn jacobian(&self, x: &LocalState, u: f64) -> ([[f64; 3]; 3], [f64; 3]) {
        let p = &self.params;
        let c = p.capacitance;
        let pj = primary::primary_jacobian(x[1], x[2], u, p);
        (
            [
                [(-self.nominal.slope_at(x[0]) - self.l_ii) / c, 1.0 / c, 0.0],
                [0.0, pj[0][0], pj[0][1]],
                [0.0, pj[1][0], pj[1][1]],
            ],
            [0.0, pj[0][2], pj[1][2]],
        )
    }

    /// RK4 propagation over `delta` with `substeps` equal steps.
    pub fn step(&self, x: &LocalState, u: f64, w: f64, delta: f64, substeps: usize) -> Result<LocalState> {
        let h = delta / substeps as f64;
        let mut y = *x;
        for _ in 0..substeps {
            let k1 = self.rhs(&y, u, w)?;
            let k2 = self.rhs(&add(&y, &k1, 0.5 * h), u, w)?;
            let k3 = self.rhs(&add(&y, &k2, 0.5 * h), u, w)?;
            let k4 = self.rhs(&add(&y, &k3, h), u, w)?;
            for j in 0..3 {
                y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        Ok(y)
    }

    /// RK4 propagation together with the exact derivatives of the discrete
    /// map: returns (x⁺, ∂x⁺/∂x, ∂x⁺/∂u).
    pub fn step_with_sensitivity(
        &self,
        x: &LocalState,
        u: f64,
        w: f64,
        delta: f64,
        substeps: usize,
    ) -> Result<(LocalState, [[f64; 3]; 3], [f64; 3])> {
        let h = delta / substeps as f64;
        let mut y = *x;
        // s[r][c]: derivative of y_r with respect to (x_0, x_1, x_2, u)[c].
        let mut s = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let tangent = |y: &LocalState, s: &[[f64; 4]; 3]| -> [[f64; 4]; 3] {
            let (a, b) = self.jacobian(y, u);
            let mut t = [[0.0; 4]; 3];
            for r in 0..3 {
                for c in 0..4 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += a[r][k] * s[k][c];
                    }
                    if c == 3 {
                        acc += b[r];
                    }
                    t[r][c] = acc;
                }
            }
            t
        };
        let adds = |s: &[[f64; 4]; 3], t: &[[f64; 4]; 3], a: f64| -> [[f64; 4]; 3] {
            let mut o = *s;
            for r in 0..3 {
                for c in 0..4 {
                    o[r][c] += a * t[r][c];
                }
            }
            o
        };
        for _ in 0..substeps {
            let k1 = self.rhs(&y, u, w)?;
            let t1 = tangent(&y, &s);
            let y2 = add(&y, &k1, 0.5 * h);
            let s2 = adds(&s, &t1, 0.5 * h);
            let k2 = self.rhs(&y2, u, w)?;
            let t2 = tangent(&y2, &s2);
            let y3 = add(&y, &k2, 0.5 * h);
            let s3 = adds(&s, &t2, 0.5 * h);
            let k3 = self.rhs(&y3, u, w)?;
            let t3 = tangent(&y3, &s3);
            let y4 = add(&y, &k3, h);
            let s4 = adds(&s, &t3, h);
            let k4 = self.rhs(&y4, u, w)?;
            let t4 = tangent(&y4, &s4);
            for j in 0..3 {
                y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            for r in 0..3 {
                for c in 0..4 {
                    s[r][c] += h / 6.0 * (t1[r][c] + 2.0 * t2[r][c] + 2.0 * t3[r][c] + t4[r][c]);
                }
            }
        }
        let a = [
            [s[0][0], s[0][1], s[0][2]],
            [s[1][0], s[1][1], s[1][2]],
            [s[2][0], s[2][1], s[2][2]],
        ];
        Ok((y, a, [s[0][3], s[1][3], s[2][3]]))
    }

    /// Fastest local rate (1/s), used to choose RK4 substeps.
    pub fn stiffness(&self) -> f64 {
        let p = &self.params;
        let v_lo = self.v_bounds.0.max(self.v_min_load);
        let volt = (self.l_ii + self.nominal.conductance + self.nominal.power / (v_lo * v_lo)) / p.capacitance;
        let cur = (p.resistance + p.k_p) / p.inductance;
        let integ = p.k_i / p.m() * p.m() / p.inductance;
        volt.max(cur).max(integ.sqrt())
    }

    /// Substeps per sample so that h·(fastest rate) ≤ 1.
    pub fn substeps_for(&self, delta: f64) -> usize {
        ((delta * self.stiffness()).ceil() as usize).max(1)
    }

    /// Steady-state reference map u(v) = ℒ_ii·v + g(v)·d̄ − w − i_s.
    pub fn reference_for(&self, v: f64, w: f64) -> f64 {
        self.l_ii * v + self.nominal.current_at(v) - w - self.params.i_s()
    }
}

fn add(y: &LocalState, k: &LocalState, a: f64) -> LocalState {
    [y[0] + a * k[0], y[1] + a * k[1], y[2] + a * k[2]]
}

/// Steady-state target of one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyState {
    pub v_ss: f64,
    pub u_ss: f64,
    /// u_ss lies strictly inside ½(−I_max, I_max), hence v_ss = v*.
    pub interior: bool,
}

/// Solves min |v − v*|² subject to u ∈ ½[−I_max, I_max], v ∈ [V_min, V_max]
/// and ℒ_ii·v + g(v)·d̄ = i_s + u + w.
///
/// When the unconstrained reference is interior the optimum is v* itself.
/// Otherwise the closest admissible voltage sits where the reference
/// reaches a current bound (or at a voltage bound); these roots are found by
/// bracketing and safeguarded Newton steps.
pub fn steady_state_solve(model: &LocalModel, w: f64, v_star: f64) -> Result<SteadyState> {
    let half = model.params.half_range();
    let u_star = model.reference_for(v_star, w);
    let (lo, hi) = model.v_bounds;
    if u_star.abs() <= half && v_star >= lo && v_star <= hi {
        return Ok(SteadyState { v_ss: v_star, u_ss: u_star, interior: u_star.abs() < half });
    }
    let admissible = |v: f64| model.reference_for(v, w).abs() <= half * (1.0 + 1e-12);
    let mut candidates: Vec<(f64, f64)> = Vec::new();
    for bound in [half, -half] {
        for v in scalar_roots(|v| model.reference_for(v, w) - bound, |v| model.l_ii + model.nominal.slope_at(v), lo, hi)
        {
            candidates.push((v, bound));
        }
    }
    for v in [lo, hi] {
        if admissible(v) {
            candidates.push((v, model.reference_for(v, w)));
        }
    }
    candidates
        .into_iter()
        .min_by(|a, b| (a.0 - v_star).abs().total_cmp(&(b.0 - v_star).abs()))
        .map(|(v, u)| SteadyState { v_ss: v, u_ss: u.clamp(-half, half), interior: false })
        .ok_or_else(|| {
            let side = if u_star > 0.0 { "upper" } else { "lower" };
            Error::Infeasible(format!(
                "no voltage in [{lo}, {hi}] V balances the node with the {side} current bound \
                 (reference at v* would be {u_star:.3} A against ±{half:.3} A)"
            ))
        })
}

/// All roots of a scalar function on [lo, hi], found by scanning for sign
/// changes and refining each bracket with Newton steps that fall back to
/// bisection whenever they leave the bracket.
pub fn scalar_roots<F, D>(f: F, df: D, lo: f64, hi: f64) -> Vec<f64>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    const SCAN: usize = 4000;
    let mut roots = Vec::new();
    let mut a = lo;
    let mut fa = f(a);
    if fa == 0.0 {
        roots.push(a);
    }
    for k in 1..=SCAN {
        let b = lo + (hi - lo) * k as f64 / SCAN as f64;
        let fb = f(b);
        if fb == 0.0 {
            roots.push(b);
        } else if fa != 0.0 && fa.signum() != fb.signum() {
            let (mut x0, mut x1, mut f0) = (a, b, fa);
            let mut x = 0.5 * (x0 + x1);
            for _ in 0..200 {
                let fx = f(x);
                if fx == 0.0 {
                    break;
                }
                if fx.signum() == f0.signum() {
                    x0 = x;
                    f0 = fx;
                } else {
                    x1 = x;
                }
                let d = df(x);
                let newton = x - fx / d;
                x = if d != 0.0 && newton > x0.min(x1) && newton < x0.max(x1) {
                    newton
                } else {
                    0.5 * (x0 + x1)
                };
                if (x1 - x0).abs() <= 1e-14 * x.abs().max(1.0) {
                    break;
                }
            }
            roots.push(x);
        }
        a = b;
        fa = fb;
    }
    roots
}

/// Local equilibrium pair (x_eq, u_eq).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalEquilibrium {
    pub x_eq: LocalState,
    pub u_eq: f64,
}

/// x_eq = (v_ss, u_ss, arcsin(2u_ss/I_max)), u_eq = u_ss.
pub fn local_equilibrium(ss: &SteadyState, params: &ConverterParams) -> LocalEquilibrium {
    let (i_eq, s_eq) = primary::equilibrium(ss.u_ss, params);
    LocalEquilibrium { x_eq: [ss.v_ss, i_eq, s_eq], u_eq: ss.u_ss }
}

/// Polytope {x : H(x − x_c) ≤ h} described relative to its centre.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Polytope {
    pub center: LocalState,
    pub rows: Vec<[f64; 3]>,
    pub h: Vec<f64>,
}

impl Polytope {
    /// Axis-aligned box x_c ± half_widths intersected with the state set
    /// 𝕏 = [V_min, V_max] × ½[−I_max, I_max] × [−π/2, π/2].
    pub fn terminal_box(center: LocalState, half_widths: [f64; 3], model: &LocalModel) -> Result<Self> {
        let half = model.params.half_range();
        let upper = [model.v_bounds.1, half, FRAC_PI_2];
        let lower = [model.v_bounds.0, -half, -FRAC_PI_2];
        let mut rows = Vec::with_capacity(6);
        let mut h = Vec::with_capacity(6);
        for j in 0..3 {
            let mut e = [0.0; 3];
            e[j] = 1.0;
            rows.push(e);
            h.push(half_widths[j].min(upper[j] - center[j]));
            e[j] = -1.0;
            rows.push(e);
            h.push(half_widths[j].min(center[j] - lower[j]));
        }
        let p = Polytope { center, rows, h };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        if let Some(k) = self.h.iter().position(|x| !(*x > 0.0)) {
            return Err(Error::TerminalSet(format!(
                "row {k} has offset {}; the centre is not interior (not a PC-set)",
                self.h[k]
            )));
        }
        Ok(())
    }

    /// Largest row ratio (H(x − x_c))_k / h_k, unclamped.
    fn ratio(&self, x: &LocalState) -> f64 {
        let d = [x[0] - self.center[0], x[1] - self.center[1], x[2] - self.center[2]];
        self.rows
            .iter()
            .zip(self.h.iter())
            .map(|(r, hk)| (r[0] * d[0] + r[1] * d[1] + r[2] * d[2]) / hk)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Minkowski gauge of x − x_c, clamped below at 0.
    pub fn gauge(&self, x: &LocalState) -> f64 {
        self.ratio(x).max(0.0)
    }

    pub fn contains(&self, x: &LocalState, scale: f64) -> bool {
        self.ratio(x) <= scale
    }
}

/// Minkowski gauge of `x − x_eq` for polytope rows `(H, h)` given relative
/// to `x_eq`.
pub fn gauge(x: &LocalState, x_eq: &LocalState, rows: &[[f64; 3]], h: &[f64]) -> Result<f64> {
    let p = Polytope { center: *x_eq, rows: rows.to_vec(), h: h.to_vec() };
    p.check()?;
    Ok(p.gauge(x))
}

/// Terminal-set geometry and the receding-horizon problem constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpSpec {
    /// Number of piecewise-constant input intervals N.
    pub horizon_steps: usize,
    /// Sampling period δ (s); the horizon is T = N·δ.
    pub sample_time: f64,
    /// RK4 substeps per interval (0 = choose from the model stiffness).
    #[serde(default)]
    pub substeps: usize,
    /// Voltage weight q (1/V² scaling of the stage cost).
    pub q: f64,
    /// Input weight n on |u − u_ss|.
    pub n: f64,
    /// Contraction factor λ of the terminal law.
    pub contraction: f64,
    /// Terminal box half-width in voltage (V).
    pub terminal_dv: f64,
    /// Terminal box half-width in ĩ as a fraction of I_max/2.
    pub terminal_di_fraction: f64,
    /// Terminal box half-width in σ (rad).
    pub terminal_dsigma: f64,
    /// Terminal penalty weight κ_ψ (0 = calibrate).
    #[serde(default)]
    pub kappa: f64,
    /// SQP iteration cap.
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Stationarity tolerance on the input step (A).
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_max_iterations() -> usize {
    40
}

fn default_tolerance() -> f64 {
    1e-6
}

impl Default for OcpSpec {
    fn default() -> Self {
        OcpSpec {
            horizon_steps: 10,
            sample_time: 5e-3,
            substeps: 0,
            q: 1.0,
            n: 0.1,
            contraction: 0.95,
            terminal_dv: 10.0,
            terminal_di_fraction: 0.9,
            terminal_dsigma: 0.9,
            kappa: 0.0,
            max_iterations: default_max_iterations(),
            tolerance: default_tolerance(),
        }
    }
}

impl OcpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_steps == 0 {
            return Err(Error::Parameter("horizon must have at least one step".into()));
        }
        if !(self.sample_time > 0.0) {
            return Err(Error::Parameter("sample time must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.contraction) {
            return Err(Error::Parameter("contraction λ must lie in [0, 1]".into()));
        }
        if !(self.q >= 0.0 && self.n >= 0.0 && self.kappa >= 0.0) {
            return Err(Error::Parameter("cost weights must be ≥ 0".into()));
        }
        if !(self.terminal_dv > 0.0 && self.terminal_di_fraction > 0.0 && self.terminal_dsigma > 0.0) {
            return Err(Error::Parameter("terminal box half-widths must be > 0".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_steps as f64 * self.sample_time
    }

    pub fn half_widths(&self, params: &ConverterParams) -> [f64; 3] {
        [self.terminal_dv, self.terminal_di_fraction * params.half_range(), self.terminal_dsigma]
    }

    fn substeps(&self, model: &LocalModel) -> usize {
        if self.substeps > 0 {
            self.substeps
        } else {
            model.substeps_for(self.sample_time)
        }
    }
}

/// Minimiser of |u − u_eq|² subject to H·x⁺ ≤ λ·h and u ∈ ½[−I_max, I_max],
/// where x⁺ is the one-sample successor of `x` under constant `u`.
///
/// The feasible set is located on a 401-point scan of the input range and
/// the boundary point nearest to u_eq is refined by bisection.
#[allow(clippy::too_many_arguments)]
pub fn terminal_control(
    model: &LocalModel,
    x: &LocalState,
    eq: &LocalEquilibrium,
    w: f64,
    polytope: &Polytope,
    contraction: f64,
    delta: f64,
    substeps: usize,
) -> Result<f64> {
    let half = model.params.half_range();
    let excess = |u: f64| -> f64 {
        match model.step(x, u, w, delta, substeps) {
            Ok(xp) => polytope.ratio(&xp) - contraction,
            Err(_) => f64::INFINITY,
        }
    };
    let feasible = |e: f64| e <= 1e-12;
    let u_eq = eq.u_eq.clamp(-half, half);
    if feasible(excess(u_eq)) {
        return Ok(u_eq);
    }
    const GRID: usize = 400;
    let grid: Vec<f64> = (0..=GRID).map(|k| -half + 2.0 * half * k as f64 / GRID as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|u| excess(*u)).collect();
    let mut best: Option<usize> = None;
    for (k, e) in vals.iter().enumerate() {
        if feasible(*e) && best.is_none_or(|b| (grid[k] - u_eq).abs() < (grid[b] - u_eq).abs()) {
            best = Some(k);
        }
    }
    let Some(k) = best else {
        // Refine around the least-violating grid point before giving up.
        let k = (0..vals.len()).min_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap_or(0);
        let (mut a, mut b) = (grid[k.saturating_sub(1)], grid[(k + 1).min(GRID)]);
        for _ in 0..100 {
            let m1 = a + (b - a) * 0.382;
            let m2 = a + (b - a) * 0.618;
            if excess(m1) < excess(m2) {
                b = m2;
            } else {
                a = m1;
            }
        }
        let u = 0.5 * (a + b);
        if feasible(excess(u)) {
            return Ok(u);
        }
        return Err(Error::TerminalSet(format!(
            "no admissible input keeps the successor in λ·X_f (least excess {:.3e})",
            excess(u)
        )));
    };
    // Bisect towards u_eq between the feasible grid point and its neighbour.
    let toward = if u_eq > grid[k] { (k + 1).min(GRID) } else { k.saturating_sub(1) };
    let mut inside = grid[k];
    let mut outside = if (grid[toward] - u_eq).abs() < (grid[k] - u_eq).abs() && !feasible(vals[toward]) {
        grid[toward]
    } else {
        // The neighbour is beyond u_eq; bisect towards u_eq itself.
        u_eq
    };
    for _ in 0..60 {
        let mid = 0.5 * (inside + outside);
        if feasible(excess(mid)) {
            inside = mid;
        } else {
            outside = mid;
        }
        if (outside - inside).abs() <= 1e-12 * half {
            break;
        }
    }
    Ok(inside)
}

/// Stage cost ℓ(x, u) = q·(v − v_ss)² + n·|u − u_ss|.
pub fn stage_cost(spec: &OcpSpec, ss: &SteadyState, x: &LocalState, u: f64) -> f64 {
    spec.q * (x[0] - ss.v_ss).powi(2) + spec.n * (u - ss.u_ss).abs()
}

/// Solver outcome classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OcpStatus {
    /// Stationary to tolerance with all constraints met.
    Converged,
    /// Iteration cap reached; the best feasible incumbent is returned.
    MaxIterations,
    /// The terminal constraint could not be met; it was softened.
    TerminalRelaxed,
}

impl OcpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            OcpStatus::Converged => "converged",
            OcpStatus::MaxIterations => "max-iterations",
            OcpStatus::TerminalRelaxed => "terminal-relaxed",
        }
    }
}

/// Count of active constraints in the returned solution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ActiveReport {
    pub input_bounds: usize,
    pub voltage_bounds: usize,
    pub terminal: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OcpSolution {
    /// u⁰(0..N−1) (A).
    pub inputs: Vec<f64>,
    /// Predicted states at the N + 1 knots.
    pub states: Vec<LocalState>,
    /// V⁰ = Σ δ·ℓ(x_k, u_k) + κ_ψ·gauge(x_N)².
    pub value: f64,
    pub status: OcpStatus,
    pub iterations: usize,
    /// Gauge of the terminal predicted state.
    pub terminal_gauge: f64,
    pub active: ActiveReport,
}

impl OcpSolution {
    /// Every predicted state in 𝕏, every input in 𝕌 and x_N in X_f.
    pub fn feasible(&self) -> bool {
        self.status != OcpStatus::TerminalRelaxed
    }
}

/// A fully specified per-node problem P_i(x, d̄, w).
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub model: LocalModel,
    pub spec: OcpSpec,
    pub x0: LocalState,
    pub w: f64,
    pub ss: SteadyState,
    pub eq: LocalEquilibrium,
    /// Terminal set; `None` when the equilibrium sits on ∂𝕏.
    pub terminal: Option<Polytope>,
    pub substeps: usize,
}

#[derive(Debug, Clone)]
struct Evaluation {
    states: Vec<LocalState>,
    value: f64,
    /// Scaled violation of state bounds (and the terminal constraint when hard).
    violation: f64,
    gauge: f64,
}

const FEAS_TOL: f64 = 1e-9;

impl OcpProblem {
    /// Computes the steady-state target, the local equilibrium and the
    /// terminal set for state `x0`, neighbour current `w` and reference
    /// voltage `v_star`.
    pub fn new(model: LocalModel, spec: OcpSpec, x0: LocalState, w: f64, v_star: f64) -> Result<Self> {
        spec.validate()?;
        let ss = steady_state_solve(&model, w, v_star)?;
        let eq = local_equilibrium(&ss, &model.params);
        let terminal = Polytope::terminal_box(eq.x_eq, spec.half_widths(&model.params), &model).ok();
        let substeps = spec.substeps(&model);
        Ok(OcpProblem { model, spec, x0, w, ss, eq, terminal, substeps })
    }

    pub fn stage_cost(&self, x: &LocalState, u: f64) -> f64 {
        stage_cost(&self.spec, &self.ss, x, u)
    }

    /// One-sample successor of `x` under constant `u`.
    pub fn successor(&self, x: &LocalState, u: f64) -> Result<LocalState> {
        self.model.step(x, u, self.w, self.spec.sample_time, self.substeps)
    }

    /// Terminal law at `x` for this problem's equilibrium and terminal set.
    pub fn terminal_control(&self, x: &LocalState) -> Result<f64> {
        let poly = self
            .terminal
            .as_ref()
            .ok_or_else(|| Error::TerminalSet("equilibrium on the state-set boundary".into()))?;
        terminal_control(&self.model, x, &self.eq, self.w, poly, self.spec.contraction, self.spec.sample_time, self.substeps)
    }

    /// Predicted trajectory of an input sequence.
    pub fn simulate(&self, inputs: &[f64]) -> Result<Vec<LocalState>> {
        let mut xs = Vec::with_capacity(inputs.len() + 1);
        xs.push(self.x0);
        for u in inputs {
            let next = self.successor(xs.last().unwrap(), *u)?;
            xs.push(next);
        }
        Ok(xs)
    }

    /// Cost J(x0, u) of an input sequence.
    pub fn cost(&self, inputs: &[f64]) -> Result<f64> {
        Ok(self.evaluate(inputs)?.value)
    }

    /// True when `inputs` satisfies every constraint of the problem,
    /// including x_N ∈ X_f.
    pub fn is_feasible(&self, inputs: &[f64]) -> bool {
        let half = self.model.params.half_range();
        if inputs.len() != self.spec.horizon_steps || inputs.iter().any(|u| u.abs() > half * (1.0 + 1e-12)) {
            return false;
        }
        match (self.evaluate(inputs), &self.terminal) {
            (Ok(e), Some(_)) => e.violation <= FEAS_TOL && e.gauge <= 1.0 + 1e-9,
            _ => false,
        }
    }

    fn evaluate(&self, inputs: &[f64]) -> Result<Evaluation> {
        let states = self.simulate(inputs)?;
        let delta = self.spec.sample_time;
        let mut value = 0.0;
        for (x, u) in states.iter().zip(inputs.iter()) {
            value += delta * self.stage_cost(x, *u);
        }
        let half = self.model.params.half_range();
        let (lo, hi) = self.model.v_bounds;
        let mut violation = 0.0;
        for x in states.iter().skip(1) {
            violation += (x[0] - hi).max(0.0) / (hi - lo) + (lo - x[0]).max(0.0) / (hi - lo);
            violation += (x[1].abs() - half * (1.0 + 1e-9)).max(0.0) / half;
            violation += (x[2].abs() - FRAC_PI_2 * (1.0 + 1e-9)).max(0.0);
        }
        let gauge = match &self.terminal {
            Some(p) => {
                let g = p.gauge(states.last().unwrap());
                value += self.spec.kappa * g * g;
                g
            }
            None => 0.0,
        };
        Ok(Evaluation { states, value, violation, gauge })
    }

    /// Forward pass with the stacked input sensitivities ∂x_k/∂u (3×N per knot).
    fn linearize(&self, inputs: &[f64]) -> Result<(Vec<LocalState>, Sensitivities)> {
        let n = inputs.len();
        let mut xs = vec![self.x0];
        let mut g: Vec<Vec<[f64; 3]>> = vec![vec![[0.0; 3]; n]];
        for (k, u) in inputs.iter().enumerate() {
            let (xp, a, b) =
                self.model.step_with_sensitivity(&xs[k], *u, self.w, self.spec.sample_time, self.substeps)?;
            let prev = &g[k];
            let mut next = vec![[0.0; 3]; n];
            for j in 0..n {
                for r in 0..3 {
                    next[j][r] = a[r][0] * prev[j][0] + a[r][1] * prev[j][1] + a[r][2] * prev[j][2];
                }
            }
            next[k] = b;
            xs.push(xp);
            g.push(next);
        }
        Ok((xs, g))
    }

    /// Shifted previous solution followed by the terminal law at the
    /// predicted end state; falls back to u_eq when the law is unavailable.
    pub fn shifted_warm_start(&self, previous: &[f64]) -> Vec<f64> {
        let n = self.spec.horizon_steps;
        let half = self.model.params.half_range();
        let mut u: Vec<f64> = previous.iter().skip(1).take(n - 1).map(|x| x.clamp(-half, half)).collect();
        while u.len() < n - 1 {
            u.push(self.eq.u_eq.clamp(-half, half));
        }
        let tail = self
            .simulate(&u)
            .ok()
            .and_then(|xs| self.terminal_control(xs.last().unwrap()).ok())
            .unwrap_or(self.eq.u_eq.clamp(-half, half));
        u.push(tail);
        u
    }

    /// Solves the problem from the given initial guess (or from the
    /// steady-state input when none is supplied).
    pub fn solve(&self, initial: Option<&[f64]>) -> Result<OcpSolution> {
        let n = self.spec.horizon_steps;
        let half = self.model.params.half_range();
        let (lo, hi) = self.model.v_bounds;
        if !(self.x0[0] >= lo && self.x0[0] <= hi) {
            return Err(Error::Infeasible(format!(
                "voltage bound: initial voltage {:.3} V outside [{lo}, {hi}] V",
                self.x0[0]
            )));
        }
        let steady = vec![self.eq.u_eq.clamp(-half, half); n];
        let mut guesses: Vec<Vec<f64>> = Vec::new();
        if let Some(init) = initial {
            if init.len() == n {
                guesses.push(init.iter().map(|u| u.clamp(-half, half)).collect());
            }
        }
        guesses.push(steady);
        let mut best: Option<(Vec<f64>, Evaluation)> = None;
        for g in guesses {
            if let Ok(e) = self.evaluate(&g) {
                let better = match &best {
                    None => true,
                    Some((_, b)) => self.better(&e, b, true),
                };
                if better {
                    best = Some((g, e));
                }
            }
        }
        let (mut u, mut cur) = best.ok_or_else(|| {
            Error::Infeasible("load singularity: every initial guess drives the voltage below the cutoff".into())
        })?;

        let mut rho_scale = 1e-6;
        let mut iterations = 0;
        let mut converged = false;
        for it in 0..self.spec.max_iterations {
            iterations = it + 1;
            let (xs, g) = self.linearize(&u)?;
            let hard_terminal = self.terminal.is_some() && cur.gauge <= 1.0 + 1e-9 && cur.violation <= FEAS_TOL;
            let step = match self.qp_step(&u, &xs, &g, rho_scale, true) {
                Some(s) => s,
                None => match self.qp_step(&u, &xs, &g, rho_scale, false) {
                    Some(s) => s,
                    None => break,
                },
            };
            let step_norm = step.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            if step_norm <= self.spec.tolerance {
                converged = true;
                break;
            }
            let mut accepted = false;
            let mut alpha = 1.0;
            for _ in 0..12 {
                let trial: Vec<f64> = u.iter().zip(step.iter()).map(|(a, d)| (a + alpha * d).clamp(-half, half)).collect();
                if let Ok(e) = self.evaluate(&trial) {
                    let keeps_terminal = !hard_terminal || e.gauge <= 1.0 + 1e-9;
                    if keeps_terminal && self.better(&e, &cur, false) {
                        let gain = cur.value - e.value;
                        u = trial;
                        cur = e;
                        accepted = true;
                        if alpha * step_norm <= self.spec.tolerance || gain <= 1e-14 * (1.0 + cur.value.abs()) {
                            converged = true;
                        }
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if converged {
                break;
            }
            if accepted {
                rho_scale = (rho_scale / 3.0).max(1e-9);
            } else {
                rho_scale *= 100.0;
                if rho_scale > 1e6 {
                    converged = true;
                    break;
                }
            }
        }
        let terminal_ok = self.terminal.is_some() && cur.gauge <= 1.0 + 1e-9;
        if cur.violation > FEAS_TOL {
            return Err(Error::Infeasible(format!(
                "state bounds violated along the best prediction (scaled violation {:.3e})",
                cur.violation
            )));
        }
        let status = if !terminal_ok {
            OcpStatus::TerminalRelaxed
        } else if converged {
            OcpStatus::Converged
        } else {
            OcpStatus::MaxIterations
        };
        let active = ActiveReport {
            input_bounds: u.iter().filter(|x| x.abs() >= half * (1.0 - 1e-9)).count(),
            voltage_bounds: cur.states.iter().filter(|x| x[0] <= lo + 1e-6 || x[0] >= hi - 1e-6).count(),
            terminal: terminal_ok && cur.gauge >= 1.0 - 1e-6,
        };
        Ok(OcpSolution {
            inputs: u,
            states: cur.states,
            value: cur.value,
            status,
            iterations,
            terminal_gauge: cur.gauge,
            active,
        })
    }

    /// Lexicographic comparison: less violation first, then lower cost.
    fn better(&self, a: &Evaluation, b: &Evaluation, allow_equal: bool) -> bool {
        let va = a.violation + (a.gauge - 1.0).max(0.0);
        let vb = b.violation + (b.gauge - 1.0).max(0.0);
        if vb > FEAS_TOL || va > FEAS_TOL {
            if va < vb - 1e-12 {
                return true;
            }
            if va > vb + 1e-12 {
                return false;
            }
        }
        if allow_equal {
            a.value <= b.value
        } else {
            a.value < b.value
        }
    }

    /// Gauss–Newton QP step for the inputs. Decision vector
    /// z = (Δu[0..N], s[0..N], t) with s_k ≥ |u_k + Δu_k − u_ss| and t the
    /// terminal gauge epigraph. With `hard` the terminal constraint t ≤ 1 is
    /// imposed; otherwise it is dropped and t is penalised heavily.
    fn qp_step(&self, u: &[f64], xs: &[LocalState], g: &[Vec<[f64; 3]>], rho_scale: f64, hard: bool) -> Option<Vec<f64>> {
        let n = u.len();
        let nz = 2 * n + 1;
        let delta = self.spec.sample_time;
        let half = self.model.params.half_range();
        let (lo, hi) = self.model.v_bounds;
        let mut q = vec![0.0; nz * nz];
        let mut c = vec![0.0; nz];
        // Voltage tracking terms δ·q·(v_k − v_ss)² for k = 1..N−1.
        for k in 1..n {
            let e = xs[k][0] - self.ss.v_ss;
            for a in 0..n {
                let ga = g[k][a][0];
                if ga == 0.0 {
                    continue;
                }
                c[a] += 2.0 * delta * self.spec.q * e * ga;
                for b in 0..n {
                    q[a * nz + b] += 2.0 * delta * self.spec.q * ga * g[k][b][0];
                }
            }
        }
        let diag_max = (0..n).map(|a| q[a * nz + a]).fold(0.0_f64, f64::max);
        let rho = rho_scale * diag_max.max(1e-12) + 1e-14;
        for a in 0..n {
            q[a * nz + a] += rho;
        }
        // L1 input term δ·n·s_k and a tiny curvature to keep Q positive definite.
        let eps_s = 1e-6 * diag_max.max(1e-12);
        for k in 0..n {
            c[n + k] = delta * self.spec.n;
            q[(n + k) * nz + (n + k)] = eps_s;
        }
        let kappa = if hard { self.spec.kappa } else { self.spec.kappa.max(1e4) };
        q[(2 * n) * nz + 2 * n] = 2.0 * kappa.max(1e-9);

        let mut a_rows: Vec<Vec<f64>> = Vec::new();
        let mut b: Vec<f64> = Vec::new();
        let mut push = |row: Vec<f64>, rhs: f64| {
            a_rows.push(row);
            b.push(rhs);
        };
        for k in 0..n {
            let mut r = vec![0.0; nz];
            r[k] = 1.0;
            push(r.clone(), half - u[k]);
            r[k] = -1.0;
            push(r, half + u[k]);
            let mut r = vec![0.0; nz];
            r[k] = 1.0;
            r[n + k] = -1.0;
            push(r, self.ss.u_ss - u[k]);
            let mut r = vec![0.0; nz];
            r[k] = -1.0;
            r[n + k] = -1.0;
            push(r, u[k] - self.ss.u_ss);
        }
        for k in 1..=n {
            let mut r = vec![0.0; nz];
            for j in 0..n {
                r[j] = g[k][j][0];
            }
            push(r.clone(), hi - xs[k][0]);
            for x in r.iter_mut() {
                *x = -*x;
            }
            push(r, xs[k][0] - lo);
        }
        if let Some(poly) = &self.terminal {
            let xn = &xs[n];
            for (row, hk) in poly.rows.iter().zip(poly.h.iter()) {
                let mut r = vec![0.0; nz];
                for j in 0..n {
                    r[j] = (row[0] * g[n][j][0] + row[1] * g[n][j][1] + row[2] * g[n][j][2]) / hk;
                }
                r[2 * n] = -1.0;
                let cur = (row[0] * (xn[0] - poly.center[0])
                    + row[1] * (xn[1] - poly.center[1])
                    + row[2] * (xn[2] - poly.center[2]))
                    / hk;
                push(r, -cur);
            }
            if hard {
                let mut r = vec![0.0; nz];
                r[2 * n] = 1.0;
                push(r, 1.0);
            }
        }
        let mut r = vec![0.0; nz];
        r[2 * n] = -1.0;
        push(r, 0.0);

        let amat: Vec<f64> = a_rows.concat();
        let sol = quadprog::solve_qp(&mut q, &c, &amat, &b, 0, false).ok()?;
        Some(sol.sol[..n].to_vec())
    }
}

/// Finds the smallest κ_ψ of the form 2^k (k ≥ 0) such that
/// ψ(x⁺) − ψ(x) ≤ −δ·ℓ(x, κ_f(x)) holds on a sampled set of terminal
/// states, with ψ = κ_ψ·gauge².
///
/// The samples are the one-step successors (under the terminal law) of a
/// 5×5×5 grid over the terminal box. Because the voltage relaxes much
/// faster than one sample, these successors lie on the set of states the
/// horizon can actually end in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaCalibration {
    pub kappa: f64,
    /// Samples used in the check.
    pub samples: usize,
    /// Samples at which no κ_ψ can satisfy the inequality (the gauge does
    /// not decrease under the terminal law).
    pub unattainable: usize,
    /// Worst margin ψ(x⁺) − ψ(x) + δ·ℓ over the attainable samples.
    pub worst_margin: f64,
    pub satisfied: bool,
}

pub fn calibrate_kappa(problem: &OcpProblem) -> Result<KappaCalibration> {
    let poly = problem
        .terminal
        .as_ref()
        .ok_or_else(|| Error::TerminalSet("equilibrium on the state-set boundary".into()))?;
    let delta = problem.spec.sample_time;
    let fractions = [-0.9, -0.45, 0.0, 0.45, 0.9];
    let mut pairs: Vec<(f64, f64, f64)> = Vec::new();
    let (hw_hi, hw_lo): (Vec<f64>, Vec<f64>) = ((0..3).map(|j| poly.h[2 * j]).collect(), (0..3).map(|j| poly.h[2 * j + 1]).collect());
    for a in fractions {
        for b in fractions {
            for c in fractions {
                let f = [a, b, c];
                let mut x0 = poly.center;
                for j in 0..3 {
                    x0[j] += if f[j] >= 0.0 { f[j] * hw_hi[j] } else { f[j] * hw_lo[j] };
                }
                let Ok(u0) = problem.terminal_control(&x0) else { continue };
                let Ok(x1) = problem.successor(&x0, u0) else { continue };
                if !poly.contains(&x1, 1.0) {
                    continue;
                }
                let Ok(u1) = problem.terminal_control(&x1) else { continue };
                let Ok(x2) = problem.successor(&x1, u1) else { continue };
                let g1 = poly.gauge(&x1);
                let g2 = poly.gauge(&x2);
                let l = delta * problem.stage_cost(&x1, u1);
                pairs.push((g1 * g1, g2 * g2, l));
            }
        }
    }
    let unattainable = pairs.iter().filter(|(g1, g2, l)| *l > 0.0 && g2 >= g1).count();
    let margin = |kappa: f64| {
        pairs
            .iter()
            .filter(|(g1, g2, l)| !(*l > 0.0 && g2 >= g1))
            .map(|(g1, g2, l)| kappa * (g2 - g1) + l)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut kappa = 1.0;
    while margin(kappa) > 0.0 && kappa < 2f64.powi(60) {
        kappa *= 2.0;
    }
    let worst = margin(kappa);
    Ok(KappaCalibration {
        kappa,
        samples: pairs.len(),
        unattainable,
        worst_margin: if worst.is_finite() { worst } else { 0.0 },
        satisfied: unattainable == 0 && worst <= 0.0,
    })
}

/// Per-sample log record of one node controller.
#[derive(Debug, Clone, Serialize)]
pub struct SampleRecord {
    pub node: usize,
    pub k: usize,
    pub w: f64,
    pub dw: f64,
    pub u0: f64,
    pub value: f64,
    pub status: String,
    /// Solution satisfies all constraints including x_N ∈ X_f.
    pub feasible: bool,
    /// Current state lies in the terminal set X_f.
    pub in_terminal_set: bool,
    /// Frozen-w check: the shifted warm start is feasible at the nominal successor.
    pub warm_start_feasible: Option<bool>,
    /// Frozen-w check: V⁰(x⁺) − V⁰(x) + δ·ℓ(x, u⁰(0)).
    pub decrease_margin: Option<f64>,
    pub u_ss: f64,
    pub v_ss: f64,
}

impl SampleRecord {
    pub fn flags(&self) -> String {
        let mut f = Vec::new();
        if self.feasible {
            f.push("feasible");
        }
        if self.in_terminal_set {
            f.push("in-terminal-set");
        }
        match self.warm_start_feasible {
            Some(true) => f.push("warm-start-ok"),
            Some(false) => f.push("warm-start-infeasible"),
            None => {}
        }
        f.join("|")
    }
}

/// Receding-horizon controller state of one node across samples.
#[derive(Debug, Clone)]
pub struct NodeController {
    pub node: usize,
    pub model: LocalModel,
    pub spec: OcpSpec,
    pub v_star: f64,
    /// Run the paired frozen-w solve that checks value decrease and
    /// warm-start feasibility.
    pub monitor: bool,
    previous: Option<Vec<f64>>,
    last_w: Option<f64>,
}

/// Output of one receding-horizon step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Reference current i_ref = u⁰(0) + i_s (A).
    pub i_ref: f64,
    pub u_eq: f64,
    pub record: SampleRecord,
    pub solution: Option<OcpSolution>,
}

impl NodeController {
    pub fn new(node: usize, model: LocalModel, spec: OcpSpec, v_star: f64, monitor: bool) -> Self {
        NodeController { node, model, spec, v_star, monitor, previous: None, last_w: None }
    }

    /// Replaces the nominal load (a scheduled step) for future solves.
    pub fn set_nominal(&mut self, nominal: Zip) {
        self.model.nominal = nominal;
    }

    /// One sample: solve P_i(x, d̄, w) warm-started from the previous
    /// solution, return the first input as a current reference.
    pub fn step(&mut self, k: usize, x: LocalState, w: f64) -> Result<StepOutput> {
        let half = self.model.params.half_range();
        let problem = OcpProblem::new(self.model, self.spec, x, w, self.v_star)?;
        let warm = self.previous.as_ref().map(|p| problem.shifted_warm_start(p));
        let dw = self.last_w.map_or(0.0, |lw| w - lw);
        self.last_w = Some(w);
        let solved = problem.solve(warm.as_deref());
        let (u0, solution) = match solved {
            Ok(sol) => (sol.inputs[0], Some(sol)),
            // Fall back to the incumbent when the solve fails.
            Err(e) => match &warm {
                Some(wu) => (wu[0], None),
                None => return Err(e),
            },
        };
        let u0 = u0.clamp(-half, half);
        let in_terminal_set = problem.terminal.as_ref().is_some_and(|p| p.contains(&x, 1.0));
        let mut record = SampleRecord {
            node: self.node,
            k,
            w,
            dw,
            u0,
            value: solution.as_ref().map_or(f64::NAN, |s| s.value),
            status: solution.as_ref().map_or("incumbent".to_string(), |s| s.status.as_str().to_string()),
            feasible: solution.as_ref().is_some_and(|s| s.feasible()),
            in_terminal_set,
            warm_start_feasible: None,
            decrease_margin: None,
            u_ss: problem.ss.u_ss,
            v_ss: problem.ss.v_ss,
        };
        if self.monitor {
            if let Some(sol) = solution.as_ref().filter(|s| s.feasible()) {
                let (ok, margin) = frozen_w_check(&problem, sol)?;
                record.warm_start_feasible = Some(ok);
                record.decrease_margin = margin;
            }
        }
        self.previous = solution.as_ref().map(|s| s.inputs.clone()).or(warm);
        Ok(StepOutput { i_ref: u0 + self.model.params.i_s(), u_eq: problem.eq.u_eq, record, solution })
    }
}

/// Paired solve with the neighbour current held fixed: move to the
/// nominal successor x⁺ = x_1, test the shifted warm start for
/// feasibility and measure V⁰(x⁺) − V⁰(x) + δ·ℓ(x, u⁰(0)).
pub fn frozen_w_check(problem: &OcpProblem, sol: &OcpSolution) -> Result<(bool, Option<f64>)> {
    let mut next = problem.clone();
    next.x0 = sol.states[1];
    let warm = next.shifted_warm_start(&sol.inputs);
    let feasible = next.is_feasible(&warm);
    let margin = match next.solve(Some(&warm)) {
        Ok(s) => Some(s.value - sol.value + problem.spec.sample_time * problem.stage_cost(&problem.x0, sol.inputs[0])),
        Err(_) => None,
    };
    Ok((feasible, margin))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn node(l_ii: f64, power: f64) -> LocalModel {
        LocalModel {
            params: ConverterParams {
                inductance: 1.8e-3,
                resistance: 0.2,
                capacitance: 22e-3,
                v_in: 800.0,
                i_max: 178.7,
                k_p: 2.0,
                k_i: 500.0,
            },
            l_ii,
            nominal: Zip::cpl(power),
            v_bounds: (240.0, 800.0),
            v_min_load: 40.0,
        }
    }

    #[test]
    fn quadprog_sign_convention() {
        // min ½x² − 2x subject to x ≤ 1 → x = 1.
        let mut q = vec![1.0];
        let s = quadprog::solve_qp(&mut q, &[-2.0], &[1.0], &[1.0], 0, false).unwrap();
        assert!((s.sol[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_steady_state() {
        let m = node(0.0, 40_850.0);
        let ss = steady_state_solve(&m, 0.0, 560.0).unwrap();
        assert!(ss.interior);
        assert_eq!(ss.v_ss, 560.0);
        assert!((ss.u_ss - (40_850.0 / 560.0 - 89.35)).abs() < 1e-12);
        assert!((ss.u_ss + 16.40).abs() < 1e-2);
        let eq = local_equilibrium(&ss, &m.params);
        assert!((eq.x_eq[2] - (2.0 * ss.u_ss / 178.7).asin()).abs() < 1e-15);
        assert!((eq.x_eq[2] + 0.1846).abs() < 1e-3);
        let r = m.rhs(&eq.x_eq, eq.u_eq, 0.0).unwrap();
        assert!(r.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn zero_load_steady_state() {
        let m = node(0.0, 0.0);
        let ss = steady_state_solve(&m, 0.0, 560.0).unwrap();
        assert_eq!((ss.v_ss, ss.u_ss), (560.0, -89.35));
        assert!(!ss.interior || ss.u_ss.abs() < 89.35);
    }

    #[test]
    fn clamped_steady_state_drops_voltage() {
        // Heavy constant-power load on an isolated node: the reference
        // saturates at +I_max/2 and the voltage moves to where P/v = I_max.
        let m = node(0.0, 120_000.0);
        let ss = steady_state_solve(&m, 0.0, 560.0).unwrap();
        assert!(!ss.interior);
        assert_eq!(ss.u_ss, 89.35);
        assert!((ss.v_ss - 120_000.0 / 178.7).abs() < 1e-6);
    }

    #[test]
    fn cpl_equilibrium_manifold_has_two_roots() {
        // ℒ_ii(v − v*) + d(1/v − 1/v*) = 0 has roots v* and d/(ℒ_ii·v*).
        let (l, d, vs) = (10.0, 40_000.0, 560.0);
        let m = node(l, d);
        let w = l * vs;
        let u = m.reference_for(vs, w);
        let roots = scalar_roots(|v| m.reference_for(v, w) - u, |v| l + m.nominal.slope_at(v), 1.0, 800.0);
        assert_eq!(roots.len(), 2);
        assert!((roots[0] - d / (l * vs)).abs() < 1e-9);
        assert!((roots[1] - vs).abs() < 1e-9);
    }

    #[test]
    fn gauge_examples() {
        let m = node(6.0, 40_000.0);
        let x_eq = [560.0, 0.0, 0.0];
        let p = Polytope::terminal_box(x_eq, [10.0, 89.35, 1.0], &m).unwrap();
        assert_eq!(p.gauge(&x_eq), 0.0);
        assert!((p.gauge(&[565.0, 0.0, 0.0]) - 0.5).abs() < 1e-15);
        assert!((p.gauge(&[560.0, -89.35, 0.0]) - 1.0).abs() < 1e-15);
        assert!(gauge(&x_eq, &x_eq, &p.rows, &[1.0, 0.0, 1.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let m = node(6.0, 40_000.0);
        let x = [555.0, 10.0, 0.2];
        let (_, a, b) = m.step_with_sensitivity(&x, 5.0, 3300.0, 5e-3, 20).unwrap();
        let h = 1e-5;
        let up = m.step(&x, 5.0 + h, 3300.0, 5e-3, 20).unwrap();
        let dn = m.step(&x, 5.0 - h, 3300.0, 5e-3, 20).unwrap();
        for r in 0..3 {
            let fd = (up[r] - dn[r]) / (2.0 * h);
            assert!((fd - b[r]).abs() <= 1e-5 * fd.abs().max(1e-3), "row {r}: {fd} vs {}", b[r]);
        }
        for c in 0..3 {
            let mut xp = x;
            let mut xm = x;
            let hc = [1e-4, 1e-4, 1e-7][c];
            xp[c] += hc;
            xm[c] -= hc;
            let up = m.step(&xp, 5.0, 3300.0, 5e-3, 20).unwrap();
            let dn = m.step(&xm, 5.0, 3300.0, 5e-3, 20).unwrap();
            for r in 0..3 {
                let fd = (up[r] - dn[r]) / (2.0 * hc);
                assert!((fd - a[r][c]).abs() <= 1e-4 * fd.abs().max(1e-3), "({r},{c}): {fd} vs {}", a[r][c]);
            }
        }
    }
}
