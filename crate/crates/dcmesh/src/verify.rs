//! Randomised property suites behind `dcmesh verify`.
//!
//! Every suite is deterministic for a fixed seed and reports each failed
//! assertion as a line of text, so two runs with the same seed produce the
//! same failure list.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{kernel_distance, pencil_eigs, transient_bound_from};
use crate::error::{Error, Result};
use crate::integrate::Rk4;
use crate::mpc::{steady_state_solve, LocalModel, OcpProblem, OcpSpec};
use crate::network::{ConverterParams, Edge, NetworkTopology, Zip};
use crate::primary;
use crate::scenario;
use crate::sim;

/// Names accepted by [`run_suite`]; `all` runs every one of them.
pub const SUITES: [&str; 6] = ["primary-invariance", "lyapunov", "kernel-bound", "kkt", "terminal", "value-decrease"];

/// Outcome of one suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub pass: bool,
    /// Number of individual assertions evaluated.
    pub checks: usize,
    pub failures: Vec<String>,
    pub summary: String,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        SuiteReport { name: name.into(), pass: true, checks: 0, failures: Vec::new(), summary: String::new() }
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.pass = false;
            if self.failures.len() < 50 {
                self.failures.push(msg());
            }
        }
    }

    fn fail(&mut self, msg: String) {
        self.check(false, || msg);
    }
}

/// Runs one named suite (or all of them).
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<SuiteReport>> {
    match name {
        "primary-invariance" => Ok(vec![primary_invariance(seed, 1000)]),
        "lyapunov" => Ok(vec![lyapunov(seed)]),
        "kernel-bound" => Ok(vec![kernel_bound(seed, 1000)]),
        "kkt" => Ok(vec![kkt(seed, 500)]),
        "terminal" => Ok(vec![terminal(seed, 100)?]),
        "value-decrease" => Ok(vec![value_decrease()?]),
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s, seed)?);
            }
            Ok(out)
        }
        other => Err(Error::Config(format!("unknown suite '{other}'; expected one of {} or all", SUITES.join(", ")))),
    }
}

/// Converter constants of the reference scenario.
pub fn reference_params() -> Result<Vec<ConverterParams>> {
    Ok(scenario::reference()?.build()?.params)
}

fn random_params(rng: &mut ChaCha8Rng, base: &[ConverterParams]) -> ConverterParams {
    let mut p = base[rng.random_range(0..base.len())];
    p.k_i = 10f64.powf(rng.random_range(1.0..3.0));
    p.k_p = rng.random_range(0.5..5.0);
    p
}

/// Integrates the driving subsystem under a piecewise-constant reference
/// and calls `visit(t, ĩ, σ)` after every step.
fn drive<F: FnMut(f64, f64, f64) -> bool>(
    p: &ConverterParams,
    x0: (f64, f64),
    refs: &[f64],
    hold: f64,
    h: f64,
    mut visit: F,
) -> Result<(f64, f64)> {
    let mut rk = Rk4::new(2);
    let mut y = [x0.0, x0.1];
    let per = (hold / h).round() as usize;
    let mut t = 0.0;
    for u in refs {
        let mut f = |_: f64, s: &[f64], d: &mut [f64]| {
            let (a, b) = primary::primary_rhs(s[0], s[1], *u, p);
            d[0] = a;
            d[1] = b;
            Ok(())
        };
        for _ in 0..per {
            rk.step(&mut f, t, &mut y, h)?;
            t += h;
            if !visit(t, y[0], y[1]) {
                return Ok((y[0], y[1]));
            }
        }
    }
    Ok((y[0], y[1]))
}

/// Monte-Carlo check that |ĩ| ≤ I_max/2 and |σ| ≤ π/2 are never left,
/// whatever the reference does; also cross-checks the σ̃ = sin σ form.
pub fn primary_invariance(seed: u64, trajectories: usize) -> SuiteReport {
    let mut rep = SuiteReport::new("primary-invariance");
    let base = match reference_params() {
        Ok(b) => b,
        Err(e) => {
            rep.fail(format!("reference scenario: {e}"));
            return rep;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..trajectories {
        let p = random_params(&mut rng, &base);
        let half = p.half_range();
        let x0 = (rng.random_range(-half..=half), rng.random_range(-FRAC_PI_2..=FRAC_PI_2));
        // References deliberately range beyond the admissible set.
        let refs: Vec<f64> = (0..20).map(|_| rng.random_range(-1.5 * half..=1.5 * half)).collect();
        let mut bad = None;
        let res = drive(&p, x0, &refs, 5e-3, 1e-5, |t, i, s| {
            let slack = (i.abs() - half) / p.i_max;
            worst = worst.max(slack);
            if slack > 1e-9 || s.abs() > FRAC_PI_2 + 1e-12 {
                bad = Some((t, i, s));
                return false;
            }
            true
        });
        if let Err(e) = res {
            rep.fail(format!("trajectory {k}: {e}"));
        }
        rep.check(bad.is_none(), || {
            let (t, i, s) = bad.unwrap();
            format!("trajectory {k}: excursion at t = {t:.5} s (ĩ = {i:.6}, σ = {s:.6})")
        });
    }
    let diff = diffeomorphism_check(seed, 50, 0.1);
    rep.check(diff.max_error <= 1e-6, || format!("σ̃ = sin σ equivalence error {:.3e} > 1e-6", diff.max_error));
    rep.summary = format!(
        "{trajectories} trajectories, worst current slack {worst:.3e}·I_max; σ̃-form max error {:.3e}",
        diff.max_error
    );
    rep
}

/// Result of integrating both coordinate forms side by side.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DiffeomorphismReport {
    pub runs: usize,
    /// max over runs and steps of max(|ĩ_a − ĩ_b|, |sin σ − σ̃|).
    pub max_error: f64,
}

/// Integrates (ĩ, σ) and (ĩ, σ̃) from matching initial states and compares
/// them under σ̃ = sin σ at every step.
pub fn diffeomorphism_check(seed: u64, runs: usize, horizon: f64) -> DiffeomorphismReport {
    let base = reference_params().unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut max_error: f64 = 0.0;
    let h = 2e-6;
    let steps = (horizon / h).round() as usize;
    for _ in 0..runs {
        let p = random_params(&mut rng, &base);
        let half = p.half_range();
        let i0 = rng.random_range(-half..=half);
        let s0 = rng.random_range(-0.99 * FRAC_PI_2..=0.99 * FRAC_PI_2);
        let u = rng.random_range(-half..=half);
        let mut a = [i0, s0];
        let mut b = [i0, s0.sin()];
        let mut ra = Rk4::new(2);
        let mut rb = Rk4::new(2);
        let mut fa = |_: f64, s: &[f64], d: &mut [f64]| {
            let (x, y) = primary::primary_rhs(s[0], s[1], u, &p);
            d[0] = x;
            d[1] = y;
            Ok(())
        };
        let mut fb = |_: f64, s: &[f64], d: &mut [f64]| {
            let (x, y) = primary::polynomial_rhs(s[0], s[1], u, &p);
            d[0] = x;
            d[1] = y;
            Ok(())
        };
        for k in 0..steps {
            let t = k as f64 * h;
            if ra.step(&mut fa, t, &mut a, h).is_err() || rb.step(&mut fb, t, &mut b, h).is_err() {
                max_error = f64::INFINITY;
                break;
            }
            max_error = max_error.max((a[0] - b[0]).abs()).max((a[1].sin() - b[1]).abs());
        }
    }
    DiffeomorphismReport { runs, max_error }
}

/// Distance to equilibrium measured in amperes: ĩ directly and σ through
/// the current M·sin σ/(r + k_P) = (I_max/2)·sin σ it commands.
fn primary_distance(p: &ConverterParams, i: f64, s: f64, eq: (f64, f64)) -> f64 {
    let h = p.half_range();
    ((i - eq.0).powi(2) + (h * (s.sin() - eq.1.sin())).powi(2)).sqrt()
}

/// Lyapunov suite: W is minimal at the equilibrium on a 201×201 grid,
/// decreases strictly along trajectories away from the equilibrium and
/// every trajectory converges.
pub fn lyapunov(seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::new("lyapunov");
    let base = match reference_params() {
        Ok(b) => b,
        Err(e) => {
            rep.fail(format!("reference scenario: {e}"));
            return rep;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Grid minimum.
    const G: usize = 201;
    for k in 0..20 {
        let p = random_params(&mut rng, &base);
        let half = p.half_range();
        let u = rng.random_range(-0.95 * half..0.95 * half);
        let eq = primary::equilibrium(u, &p);
        let w_eq = match primary::lyapunov_w(eq.0, eq.1, u, &p) {
            Ok(w) => w,
            Err(e) => {
                rep.fail(format!("u sample {k}: {e}"));
                continue;
            }
        };
        let mut min = (f64::INFINITY, 0.0, 0.0);
        for a in 0..G {
            let i = -half + 2.0 * half * (a + 1) as f64 / (G + 1) as f64;
            for b in 0..G {
                let s = -FRAC_PI_2 + std::f64::consts::PI * (b + 1) as f64 / (G + 1) as f64;
                if let Ok(w) = primary::lyapunov_w(i, s, u, &p) {
                    if w < min.0 {
                        min = (w, i, s);
                    }
                }
            }
        }
        let tol = 1e-12 * w_eq.abs().max(1.0);
        rep.check(min.0 >= w_eq - tol, || {
            format!("u = {u:.4}: grid value {:.12e} below W(eq) = {w_eq:.12e}", min.0)
        });
        let cell_i = 2.0 * half / (G + 1) as f64;
        let cell_s = std::f64::consts::PI / (G + 1) as f64;
        rep.check((min.1 - eq.0).abs() <= cell_i && (min.2 - eq.1).abs() <= cell_s, || {
            format!("u = {u:.4}: grid argmin ({:.4}, {:.4}) not adjacent to equilibrium ({:.4}, {:.4})", min.1, min.2, eq.0, eq.1)
        });
    }

    // Strict decrease and convergence along 100 trajectories.
    let mut slowest = 0.0_f64;
    for k in 0..100 {
        let p = random_params(&mut rng, &base);
        let half = p.half_range();
        let u = rng.random_range(-0.9 * half..0.9 * half);
        let eq = primary::equilibrium(u, &p);
        let x0 = (rng.random_range(-half..half), rng.random_range(-0.99 * FRAC_PI_2..0.99 * FRAC_PI_2));
        let ball = 1e-4 * p.i_max;
        let sample_every = 10;
        let mut last_w = primary::lyapunov_w(x0.0, x0.1, u, &p).unwrap_or(f64::INFINITY);
        let mut last_d = primary_distance(&p, x0.0, x0.1, eq);
        let mut step = 0usize;
        let mut increase = None;
        let mut converged_at = None;
        // Horizon from the slow pole k_I·cos²σ_eq/(r + k_P), step from the fast one.
        let slow = p.k_i * eq.1.cos().powi(2) / (p.resistance + p.k_p);
        let horizon = (14.0 / slow).clamp(1.0, 120.0);
        let h = 0.2 * p.inductance / (p.resistance + p.k_p);
        let hold = 1000.0 * h;
        let refs = vec![u; (horizon / hold).ceil() as usize];
        let res = drive(&p, x0, &refs, hold, h, |t, i, s| {
            step += 1;
            if !step.is_multiple_of(sample_every) {
                return true;
            }
            let w = primary::lyapunov_w(i, s, u, &p).unwrap_or(f64::INFINITY);
            let d = primary_distance(&p, i, s, eq);
            if last_d > ball && !(w < last_w) && increase.is_none() {
                increase = Some((t, w - last_w, last_d));
            }
            if d <= ball && converged_at.is_none() {
                converged_at = Some(t);
            }
            last_w = w;
            last_d = d;
            true
        });
        if let Err(e) = res {
            rep.fail(format!("trajectory {k}: {e}"));
            continue;
        }
        rep.check(increase.is_none(), || {
            let (t, dw, d) = increase.unwrap();
            format!("trajectory {k}: W did not decrease at t = {t:.5} s (ΔW = {dw:.3e}, distance {d:.3e} A)")
        });
        rep.check(converged_at.is_some() && last_d <= ball, || {
            format!("trajectory {k}: final distance {last_d:.3e} A exceeds 1e-4·I_max = {ball:.3e} A")
        });
        slowest = slowest.max(converged_at.unwrap_or(f64::INFINITY));
    }
    rep.summary = format!("20 grid checks, 100 trajectories; slowest entry into the 1e-4·I_max ball at {slowest:.3} s");
    rep
}

/// Random connected graph on `n` nodes: a random spanning tree plus extra
/// edges with probability 0.3.
pub fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize) -> Result<NetworkTopology> {
    let mut edges = Vec::new();
    let mut present = vec![vec![false; n]; n];
    for i in 1..n {
        let j = rng.random_range(0..i);
        present[i][j] = true;
        present[j][i] = true;
        edges.push(Edge { from: j, to: i, resistance: rng.random_range(0.05..2.0), inductance: 0.0 });
    }
    for i in 0..n {
        for j in i + 1..n {
            if !present[i][j] && rng.random_bool(0.3) {
                edges.push(Edge { from: i, to: j, resistance: rng.random_range(0.05..2.0), inductance: 0.0 });
            }
        }
    }
    NetworkTopology::new(n, edges)
}

/// Monte-Carlo check of the kernel attractivity bound for C·dv/dt = −ℒv + u
/// with ‖u(t)‖ ≤ B_u.
pub fn kernel_bound(seed: u64, runs: usize) -> SuiteReport {
    let mut rep = SuiteReport::new("kernel-bound");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = 0usize;
    let mut tightest = f64::INFINITY;
    for run in 0..runs {
        let n = rng.random_range(2..=8);
        let topo = match random_connected_graph(&mut rng, n) {
            Ok(t) => t,
            Err(e) => {
                rep.fail(format!("run {run}: {e}"));
                continue;
            }
        };
        let l = match topo.laplacian() {
            Ok(l) => l,
            Err(e) => {
                rep.fail(format!("run {run}: {e}"));
                continue;
            }
        };
        let c: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-3.0..-1.3))).collect();
        let spec = match pencil_eigs(&c, &l) {
            Ok(s) => s,
            Err(e) => {
                rep.fail(format!("run {run}: {e}"));
                continue;
            }
        };
        let b_u = rng.random_range(1.0..100.0);
        let v0: Vec<f64> = (0..n).map(|_| 500.0 + rng.random_range(-20.0..20.0)).collect();
        let lam_min = spec.eigenvalues[1];
        let lam_max = *spec.eigenvalues.last().unwrap();
        let h = 0.1 / lam_max;
        let t_end = (5.0 / lam_min).min(1.0);
        let hold_steps = ((t_end / 40.0) / h).ceil().max(1.0) as usize;
        let steps = (t_end / h).ceil() as usize;
        let mut rk = Rk4::new(n);
        let mut v = v0.clone();
        let mut u = vec![0.0; n];
        let mut bad = None;
        for k in 0..steps {
            if k % hold_steps == 0 {
                // Uniform direction, radius up to B_u.
                let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let r = b_u * rng.random_range(0.5..=1.0);
                for i in 0..n {
                    u[i] = r * dir[i] / norm;
                }
            }
            let mut f = |_: f64, x: &[f64], d: &mut [f64]| {
                for i in 0..n {
                    let lv: f64 = (0..n).map(|j| l[(i, j)] * x[j]).sum();
                    d[i] = (u[i] - lv) / c[i];
                }
                Ok(())
            };
            if let Err(e) = rk.step(&mut f, k as f64 * h, &mut v, h) {
                bad = Some(format!("integration: {e}"));
                break;
            }
            let t = (k + 1) as f64 * h;
            let bound = match transient_bound_from(&spec, b_u, t, &v0, &c) {
                Ok(b) => b,
                Err(e) => {
                    bad = Some(format!("bound: {e}"));
                    break;
                }
            };
            let kd = kernel_distance(&v);
            samples += 1;
            tightest = tightest.min(bound + 1e-6 * b_u - kd);
            if kd > bound + 1e-6 * b_u {
                bad = Some(format!("t = {t:.4e} s: kernel distance {kd:.6e} exceeds bound {bound:.6e}"));
                break;
            }
        }
        rep.check(bad.is_none(), || format!("run {run} (n = {n}): {}", bad.clone().unwrap_or_default()));
    }
    rep.summary = format!("{runs} random graphs, {samples} samples, smallest slack {tightest:.3e} V");
    rep
}

/// Scalar brute force of min |v − v*|² s.t. |u(v)| ≤ I_max/2 on a grid.
fn grid_steady_state(model: &LocalModel, w: f64, v_star: f64, step: f64) -> Option<f64> {
    let half = model.params.half_range();
    let (lo, hi) = model.v_bounds;
    let count = ((hi - lo) / step).round() as usize;
    (0..=count)
        .map(|k| lo + k as f64 * step)
        .filter(|v| model.reference_for(*v, w).abs() <= half)
        .min_by(|a, b| (a - v_star).abs().total_cmp(&(b - v_star).abs()))
}

fn random_node(rng: &mut ChaCha8Rng) -> LocalModel {
    LocalModel {
        params: ConverterParams {
            inductance: 1.8e-3,
            resistance: 0.2,
            capacitance: 22e-3,
            v_in: 800.0,
            i_max: rng.random_range(100.0..250.0),
            k_p: 2.0,
            k_i: 500.0,
        },
        l_ii: rng.random_range(0.0..20.0),
        nominal: Zip {
            conductance: rng.random_range(0.0..0.1),
            current: rng.random_range(0.0..50.0),
            power: rng.random_range(0.0..50_000.0),
        },
        v_bounds: (240.0, 800.0),
        v_min_load: 40.0,
    }
}

/// Steady-state target suite: interior references give v_ss = v* exactly
/// and agree with a 0.01 V grid minimiser; clamped references agree with
/// the grid minimiser too.
pub fn kkt(seed: u64, instances: usize) -> SuiteReport {
    let mut rep = SuiteReport::new("kkt");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_grid: f64 = 0.0;
    for k in 0..instances {
        let m = random_node(&mut rng);
        let half = m.params.half_range();
        let v_star = rng.random_range(400.0..700.0);
        let u = rng.random_range(-0.95 * half..0.95 * half);
        let w = m.l_ii * v_star + m.nominal.current_at(v_star) - m.params.i_s() - u;
        match steady_state_solve(&m, w, v_star) {
            Ok(ss) => {
                rep.check(ss.interior && (ss.v_ss - v_star).abs() <= 1e-6, || {
                    format!("instance {k}: v_ss = {:.9} V, v* = {v_star:.9} V", ss.v_ss)
                });
                rep.check(ss.v_ss == v_star, || format!("instance {k}: v_ss not bit-equal to v*"));
                match grid_steady_state(&m, w, v_star, 0.01) {
                    Some(g) => {
                        worst_grid = worst_grid.max((g - ss.v_ss).abs());
                        rep.check((g - ss.v_ss).abs() <= 0.01, || {
                            format!("instance {k}: grid minimiser {g:.4} V vs v_ss {:.4} V", ss.v_ss)
                        });
                    }
                    None => rep.fail(format!("instance {k}: grid found no feasible voltage")),
                }
            }
            Err(e) => rep.fail(format!("instance {k}: {e}")),
        }
    }
    // Saturated references: the closest feasible voltage moves away from v*.
    let mut clamped = 0;
    for k in 0..instances / 5 {
        let m = random_node(&mut rng);
        let half = m.params.half_range();
        let v_star = rng.random_range(400.0..700.0);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let u = sign * rng.random_range(1.05 * half..2.0 * half);
        let w = m.l_ii * v_star + m.nominal.current_at(v_star) - m.params.i_s() - u;
        let grid = grid_steady_state(&m, w, v_star, 0.01);
        match (steady_state_solve(&m, w, v_star), grid) {
            (Ok(ss), Some(g)) => {
                clamped += 1;
                rep.check(!ss.interior && (ss.u_ss.abs() - half).abs() <= 1e-9 * half || ss.v_ss == m.v_bounds.0 || ss.v_ss == m.v_bounds.1, || {
                    format!("clamped instance {k}: u_ss = {:.6} not on a bound", ss.u_ss)
                });
                rep.check((g - ss.v_ss).abs() <= 0.01, || {
                    format!("clamped instance {k}: grid {g:.4} V vs solver {:.4} V", ss.v_ss)
                });
            }
            (Err(_), None) => {}
            (Ok(ss), None) => {
                // A feasible point narrower than the grid spacing.
                rep.check(m.reference_for(ss.v_ss, w).abs() <= half * (1.0 + 1e-9), || {
                    format!("clamped instance {k}: solver returned infeasible v_ss = {:.4}", ss.v_ss)
                });
            }
            (Err(e), Some(g)) => rep.fail(format!("clamped instance {k}: solver failed ({e}) but grid found {g:.4} V")),
        }
    }
    rep.summary = format!(
        "{instances} interior instances (max grid gap {worst_grid:.4} V), {clamped} saturated instances cross-checked"
    );
    rep
}

/// Builds the node problem of the reference scenario at its nominal
/// operating point (uniform voltage v*).
pub fn reference_problem(node: usize) -> Result<OcpProblem> {
    let s = scenario::reference()?.build()?;
    let l = s.topology.laplacian()?;
    let model = s.local_model(node, l[(node, node)], s.loads[node].nominal);
    let w = l[(node, node)] * s.v_star;
    let mut spec: OcpSpec = s.ocp;
    let x0 = [s.v_star, 0.0, 0.0];
    let mut p = OcpProblem::new(model, spec, x0, w, s.v_star)?;
    spec.kappa = crate::mpc::calibrate_kappa(&p)?.kappa;
    p.spec = spec;
    p.x0 = p.eq.x_eq;
    Ok(p)
}

fn random_in_box(rng: &mut ChaCha8Rng, p: &OcpProblem) -> [f64; 3] {
    let poly = p.terminal.as_ref().expect("terminal set");
    let mut x = poly.center;
    for j in 0..3 {
        let (hi, lo) = (poly.h[2 * j], poly.h[2 * j + 1]);
        x[j] += rng.random_range(-lo..=hi);
    }
    x
}

/// One-dimensional brute force of the N = 1 problem
/// min δ·ℓ(x0, u) + κ·gauge(x1(u))² subject to x1 ∈ X_f.
fn brute_force_one_step(p: &OcpProblem) -> Option<(f64, f64)> {
    let half = p.model.params.half_range();
    let poly = p.terminal.as_ref()?;
    let delta = p.spec.sample_time;
    let obj = |u: f64| -> f64 {
        match p.successor(&p.x0, u) {
            Ok(x1) if poly.contains(&x1, 1.0 + 1e-12) && x1[0] >= p.model.v_bounds.0 && x1[0] <= p.model.v_bounds.1 => {
                let g = poly.gauge(&x1);
                delta * p.stage_cost(&p.x0, u) + p.spec.kappa * g * g
            }
            _ => f64::INFINITY,
        }
    };
    const GRID: usize = 4000;
    let grid: Vec<f64> = (0..=GRID).map(|k| -half + 2.0 * half * k as f64 / GRID as f64).collect();
    let mut best = (f64::INFINITY, 0.0);
    for u in &grid {
        let v = obj(*u);
        if v < best.0 {
            best = (v, *u);
        }
    }
    if !best.0.is_finite() {
        return None;
    }
    // Golden-section refinement on the neighbouring cells, plus the kink at u_ss.
    let cell = 2.0 * half / GRID as f64;
    let (mut a, mut b) = ((best.1 - cell).max(-half), (best.1 + cell).min(half));
    for _ in 0..200 {
        let m1 = a + 0.381966 * (b - a);
        let m2 = a + 0.618034 * (b - a);
        if obj(m1) <= obj(m2) {
            b = m2;
        } else {
            a = m1;
        }
    }
    for u in [0.5 * (a + b), p.ss.u_ss.clamp(-half, half)] {
        let v = obj(u);
        if v < best.0 {
            best = (v, u);
        }
    }
    Some((best.1, best.0))
}

/// Terminal-set suite: invariance under the terminal law, the equilibrium
/// fixed point of the problem and the N = 1 cross-check.
pub fn terminal(seed: u64, states: usize) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("terminal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let problems: Vec<OcpProblem> = (0..6).map(reference_problem).collect::<Result<_>>()?;

    // Equilibrium fixed point: u⁰ ≡ u_eq, value 0.
    for (i, p) in problems.iter().enumerate() {
        match p.solve(None) {
            Ok(sol) => {
                let dev = sol.inputs.iter().map(|u| (u - p.eq.u_eq).abs()).fold(0.0, f64::max);
                rep.check(dev <= 1e-6 && sol.value.abs() <= 1e-9, || {
                    format!("node {i}: equilibrium solve deviates by {dev:.3e} A, value {:.3e}", sol.value)
                });
            }
            Err(e) => rep.fail(format!("node {i}: equilibrium solve failed: {e}")),
        }
        match p.terminal_control(&p.eq.x_eq) {
            Ok(u) => rep.check(u == p.eq.u_eq, || format!("node {i}: terminal law at x_eq gives {u}")),
            Err(e) => rep.fail(format!("node {i}: terminal law at x_eq: {e}")),
        }
    }

    // Invariance: 50 steps of the terminal law from random states in X_f.
    for k in 0..states {
        let p = &problems[rng.random_range(0..problems.len())];
        let poly = p.terminal.as_ref().expect("terminal set");
        let mut x = random_in_box(&mut rng, p);
        for step in 0..50 {
            let u = match p.terminal_control(&x) {
                Ok(u) => u,
                Err(e) => {
                    rep.fail(format!("state {k}, step {step}: {e}"));
                    break;
                }
            };
            match p.successor(&x, u) {
                Ok(next) => {
                    let inside = poly.contains(&next, p.spec.contraction + 1e-9);
                    rep.check(inside, || {
                        format!("state {k}, step {step}: successor gauge {:.6} > λ", poly.gauge(&next))
                    });
                    if !inside {
                        break;
                    }
                    x = next;
                }
                Err(e) => {
                    rep.fail(format!("state {k}, step {step}: {e}"));
                    break;
                }
            }
        }
    }

    // N = 1 problem against a one-dimensional brute force.
    let mut compared = 0;
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let base = &problems[rng.random_range(0..problems.len())];
        let mut p = base.clone();
        p.spec.horizon_steps = 1;
        p.x0 = random_in_box(&mut rng, base);
        let Some((u_bf, v_bf)) = brute_force_one_step(&p) else { continue };
        compared += 1;
        match p.solve(None) {
            Ok(sol) => {
                let gap = sol.value - v_bf;
                worst = worst.max(gap.abs());
                rep.check(gap <= 1e-6 * v_bf.abs().max(1.0) && sol.feasible(), || {
                    format!(
                        "N = 1 instance {k}: solver value {:.9e} (u = {:.6}) vs brute force {v_bf:.9e} (u = {u_bf:.6})",
                        sol.value, sol.inputs[0]
                    )
                });
            }
            Err(e) => rep.fail(format!("N = 1 instance {k}: {e}")),
        }
    }
    rep.summary = format!("{states} invariance runs × 50 steps; {compared} N = 1 cross-checks, worst value gap {worst:.3e}");
    Ok(rep)
}

/// Value decrease and warm-start feasibility with frozen neighbour
/// currents along the reference closed loop.
pub fn value_decrease() -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("value-decrease");
    let s = scenario::reference()?.build()?;
    let out = sim::run(&s)?;
    if let Some(e) = &out.failure {
        rep.fail(format!("closed loop failed: {e}"));
    }
    for name in ["value-decrease", "warm-start-feasibility"] {
        match out.monitor(name) {
            Some(m) => rep.check(m.pass, || format!("{name}: {} ({:.4} vs {:.4})", m.detail, m.worst, m.limit)),
            None => rep.fail(format!("{name}: monitor missing")),
        }
    }
    rep.summary = out
        .monitors
        .iter()
        .filter(|m| m.name == "value-decrease" || m.name == "warm-start-feasibility")
        .map(|m| m.detail.clone())
        .collect::<Vec<_>>()
        .join("; ");
    Ok(rep)
}
