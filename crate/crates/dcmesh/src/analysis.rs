//! Spectral and equilibrium analysis of the voltage layer
//! `C·dv/dt = −ℒv − f_L(v) + ĩ + i_s`.
//!
//! Covers the generalized eigenproblem of the pencil (ℒ, C), the distance
//! to the synchronisation manifold ker ℒ = span{𝟙}, the kernel
//! attractivity bounds, Newton equilibria with several start points, the
//! Bergman storage function and the two-node ramp experiment.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrate::Rk4;
use crate::network::{LoadModel, NetworkTopology};

/// Generalized eigenpairs ℒξ = λCξ, ascending, with ⟨ξ_i, Cξ_j⟩ = δ_ij.
#[derive(Debug, Clone)]
pub struct PencilSpectrum {
    pub eigenvalues: Vec<f64>,
    /// Column i holds ξ_i.
    pub eigenvectors: DMatrix<f64>,
}

impl PencilSpectrum {
    /// Number of eigenvalues within 1e−10·max λ of zero.
    pub fn kernel_dimension(&self) -> usize {
        let scale = self.eigenvalues.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let tol = if scale > 0.0 { 1e-10 * scale } else { 1e-300 };
        self.eigenvalues.iter().filter(|x| x.abs() <= tol).count()
    }

    /// ‖Ξ₋₁ − Ξ̃‖₂: spectral norm of the non-kernel eigenvectors after
    /// removing each column's component average.
    pub fn deviation_norm(&self) -> f64 {
        let n = self.eigenvalues.len();
        if n < 2 {
            return 0.0;
        }
        let mut m = self.eigenvectors.columns(1, n - 1).into_owned();
        for mut col in m.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        m.singular_values().max()
    }
}

/// Solves the pencil eigenproblem for diagonal capacitances `c` via the
/// symmetric reduction C^{-1/2} ℒ C^{-1/2}.
pub fn pencil_eigs(c: &[f64], l: &DMatrix<f64>) -> Result<PencilSpectrum> {
    let n = c.len();
    if l.nrows() != n || l.ncols() != n {
        return Err(Error::Parameter(format!("Laplacian is {}×{}, expected {n}×{n}", l.nrows(), l.ncols())));
    }
    if c.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::Parameter("capacitances must be > 0".into()));
    }
    let d: Vec<f64> = c.iter().map(|x| 1.0 / x.sqrt()).collect();
    let s = DMatrix::from_fn(n, n, |i, j| d[i] * 0.5 * (l[(i, j)] + l[(j, i)]) * d[j]);
    let eig = s.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lnorm = l.norm();
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    if let Some(min) = eigenvalues.first() {
        if *min < -1e-10 * lnorm.max(1e-300) {
            return Err(Error::Numerical(format!(
                "Laplacian is not positive semidefinite: smallest pencil eigenvalue {min}"
            )));
        }
    }
    let mut vecs = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let y = eig.eigenvectors.column(k);
        let sign = if y.sum() < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vecs[(i, col)] = sign * d[i] * y[i];
        }
    }
    Ok(PencilSpectrum { eigenvalues, eigenvectors: vecs })
}

/// Euclidean distance from `v` to span{𝟙}, i.e. |v − mean(v)·𝟙|.
pub fn kernel_distance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>().sqrt()
}

fn nonkernel(spec: &PencilSpectrum) -> Result<(usize, Vec<(f64, f64)>)> {
    let n = spec.eigenvalues.len();
    let k = spec.kernel_dimension();
    if n > 1 && k != 1 {
        return Err(Error::Config(format!(
            "pencil has {k} zero eigenvalues; the network is not connected"
        )));
    }
    let pairs = (1..n)
        .map(|i| (spec.eigenvalues[i], spec.eigenvectors.column(i).norm()))
        .collect();
    Ok((k, pairs))
}

/// Radius η of the attractive neighbourhood of ker ℒ for |u(t)| ≤ B_u:
///
/// ```text
/// η = B_u · ‖Ξ₋₁ − Ξ̃‖ · Σ_{i≥1} |ξ_i| / λ_i
/// ```
///
/// For C = I the eigenvectors are orthonormal and orthogonal to 𝟙, the two
/// norm factors equal one, and η reduces to B_u·Σ_{i≥1} 1/λ_i.
pub fn eta_bound(spec: &PencilSpectrum, b_u: f64) -> Result<f64> {
    let (_, pairs) = nonkernel(spec)?;
    if b_u == 0.0 {
        return Ok(0.0);
    }
    let sum: f64 = pairs.iter().map(|(lam, xn)| xn / lam).sum();
    Ok(b_u * spec.deviation_norm() * sum)
}

/// Time-t bound on the kernel distance for trajectories that start on
/// ker ℒ: B_u·‖Ξ₋₁ − Ξ̃‖·Σ_{i≥1} |ξ_i|·(1 − e^{−λ_i t})/λ_i.
pub fn transient_bound(spec: &PencilSpectrum, b_u: f64, t: f64) -> Result<f64> {
    let (_, pairs) = nonkernel(spec)?;
    if b_u == 0.0 {
        return Ok(0.0);
    }
    let sum: f64 = pairs.iter().map(|(lam, xn)| xn * (-(-lam * t).exp_m1()) / lam).sum();
    Ok(b_u * spec.deviation_norm() * sum)
}

/// [`transient_bound`] plus the decaying contribution of an initial state
/// `v0` that is off the kernel: ‖Ξ₋₁ − Ξ̃‖·Σ_{i≥1} e^{−λ_i t}|⟨ξ_i, C v0⟩|.
pub fn transient_bound_from(spec: &PencilSpectrum, b_u: f64, t: f64, v0: &[f64], c: &[f64]) -> Result<f64> {
    let forced = transient_bound(spec, b_u, t)?;
    let n = spec.eigenvalues.len();
    let mut free = 0.0;
    for i in 1..n {
        let y0: f64 = (0..n).map(|k| spec.eigenvectors[(k, i)] * c[k] * v0[k]).sum();
        free += (-spec.eigenvalues[i] * t).exp() * y0.abs();
    }
    Ok(forced + spec.deviation_norm() * free)
}

/// One network equilibrium.
#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumResult {
    pub v_eq: Vec<f64>,
    /// Line currents diag(1/r_e)·B·v_eq in edge order.
    pub i_line_eq: Vec<f64>,
    /// ‖f_L(v) + ℒv − injections‖ at the returned point.
    pub residual: f64,
    pub iterations: usize,
    /// Every voltage lies in the supplied admissible band.
    pub in_bounds: bool,
    /// The Jacobian has a null space here (equilibria form a continuum).
    pub kernel: bool,
}

/// All distinct equilibria found from the fixed start set, with the root
/// nearest to v*·𝟙 first.
#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumSet {
    pub roots: Vec<EquilibriumResult>,
    /// More than one distinct root was found.
    pub multiple: bool,
}

impl EquilibriumSet {
    pub fn primary(&self) -> &EquilibriumResult {
        &self.roots[0]
    }
}

/// Start points for the Newton solver, as multiples of v*.
pub const EQUILIBRIUM_STARTS: [f64; 3] = [1.0, 0.5, 1.2];

struct NewtonOutcome {
    v: DVector<f64>,
    residual: f64,
    iterations: usize,
    history: Vec<f64>,
    converged: bool,
    kernel: bool,
}

fn residual(l: &DMatrix<f64>, loads: &[LoadModel], inj: &[f64], v: &DVector<f64>) -> Result<DVector<f64>> {
    let lv = l * v;
    let mut r = DVector::zeros(v.len());
    for i in 0..v.len() {
        r[i] = loads[i].load_current(v[i], false)? + lv[i] - inj[i];
    }
    Ok(r)
}

fn jacobian(l: &DMatrix<f64>, loads: &[LoadModel], v: &DVector<f64>) -> DMatrix<f64> {
    let mut jac = l.clone();
    for i in 0..v.len() {
        jac[(i, i)] += loads[i].actual.slope_at(v[i]);
    }
    jac
}

fn newton(l: &DMatrix<f64>, loads: &[LoadModel], inj: &[f64], start: DVector<f64>, tol: f64) -> NewtonOutcome {
    let mut v = start;
    let mut history = Vec::new();
    let mut kernel = false;
    let mut r = match residual(l, loads, inj, &v) {
        Ok(r) => r,
        Err(_) => {
            return NewtonOutcome { v, residual: f64::INFINITY, iterations: 0, history, converged: false, kernel }
        }
    };
    let mut rn = r.norm();
    history.push(rn);
    for it in 1..=100 {
        let jac = jacobian(l, loads, &v);
        let svd = jac.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        kernel = smin <= 1e-12 * smax.max(1e-300);
        if rn <= tol {
            return NewtonOutcome { v, residual: rn, iterations: it - 1, history, converged: true, kernel };
        }
        let step = match svd.solve(&r, 1e-12 * smax.max(1e-300)) {
            Ok(s) => s,
            Err(_) => break,
        };
        // Backtracking keeps constant-power loads above their cutoff and
        // guarantees a non-increasing residual.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &v - alpha * &step;
            if let Ok(rt) = residual(l, loads, inj, &trial) {
                let rtn = rt.norm();
                if rtn < rn || rtn <= tol {
                    v = trial;
                    r = rt;
                    rn = rtn;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        history.push(rn);
        if !accepted {
            break;
        }
        if alpha * step.norm() <= 1e-15 * v.norm().max(1.0) && rn > tol {
            break;
        }
    }
    let converged = rn <= tol;
    let iterations = history.len() - 1;
    NewtonOutcome { v, residual: rn, iterations, history, converged, kernel }
}

/// Solves f_L(v) + ℒv = ĩ + i_s for the node voltages by Newton's method
/// from the start points {1, 0.5, 1.2}·v*·𝟙, using the true load
/// parameters. `injections` are the converter currents ĩ + i_s.
pub fn network_equilibrium(
    topology: &NetworkTopology,
    loads: &[LoadModel],
    injections: &[f64],
    v_star: f64,
    v_bounds: (f64, f64),
) -> Result<EquilibriumSet> {
    network_equilibrium_from(topology, loads, injections, v_star, v_bounds, &[])
}

/// [`network_equilibrium`] with extra start points tried before the
/// fixed set (useful for warm starts along a trajectory).
pub fn network_equilibrium_from(
    topology: &NetworkTopology,
    loads: &[LoadModel],
    injections: &[f64],
    v_star: f64,
    v_bounds: (f64, f64),
    extra_starts: &[Vec<f64>],
) -> Result<EquilibriumSet> {
    let n = topology.node_count();
    if loads.len() != n || injections.len() != n {
        return Err(Error::Parameter("loads and injections must have one entry per node".into()));
    }
    let l = topology.laplacian()?;
    let scale = injections.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let tol = 1e-11 * scale;
    let mut starts: Vec<DVector<f64>> = extra_starts.iter().map(|s| DVector::from_column_slice(s)).collect();
    starts.extend(EQUILIBRIUM_STARTS.iter().map(|k| DVector::from_element(n, k * v_star)));

    let b = topology.incidence();
    let g = topology.conductances();
    let target = DVector::from_element(n, v_star);
    let mut roots: Vec<EquilibriumResult> = Vec::new();
    let mut best_history: Option<Vec<f64>> = None;
    for s in starts {
        let out = newton(&l, loads, injections, s, tol);
        if !out.converged {
            let last = out.history.last().copied().unwrap_or(f64::INFINITY);
            let better = best_history.as_ref().is_none_or(|h| last < *h.last().unwrap_or(&f64::INFINITY));
            if better {
                best_history = Some(out.history);
            }
            continue;
        }
        let dup = roots.iter().any(|r| {
            let d: f64 = r.v_eq.iter().zip(out.v.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            d <= 1e-6 * out.v.norm().max(1.0)
        });
        if dup {
            continue;
        }
        let bv = &b * &out.v;
        let i_line_eq: Vec<f64> = bv.iter().zip(g.iter()).map(|(x, y)| x * y).collect();
        let in_bounds = out.v.iter().all(|x| *x >= v_bounds.0 && *x <= v_bounds.1);
        roots.push(EquilibriumResult {
            v_eq: out.v.iter().copied().collect(),
            i_line_eq,
            residual: out.residual,
            iterations: out.iterations,
            in_bounds,
            kernel: out.kernel,
        });
    }
    if roots.is_empty() {
        return Err(Error::EquilibriumNotFound { residuals: best_history.unwrap_or_default() });
    }
    roots.sort_by(|a, b| {
        let da = (DVector::from_column_slice(&a.v_eq) - &target).norm();
        let db = (DVector::from_column_slice(&b.v_eq) - &target).norm();
        da.total_cmp(&db)
    });
    let multiple = roots.len() > 1;
    Ok(EquilibriumSet { roots, multiple })
}

/// Bergman storage S(v) − S(v_eq) − ∇S(v_eq)·(v − v_eq) with S = ½vᵀCv.
pub fn bergman(v: &[f64], v_eq: &[f64], c: &[f64]) -> f64 {
    let s = |x: &[f64]| 0.5 * x.iter().zip(c.iter()).map(|(a, ci)| ci * a * a).sum::<f64>();
    let grad_term: f64 = (0..v.len()).map(|i| c[i] * v_eq[i] * (v[i] - v_eq[i])).sum();
    s(v) - s(v_eq) - grad_term
}

/// Sampled response of C·dv/dt = −ℒv − d + u.
#[derive(Debug, Clone, Serialize)]
pub struct RampTrace {
    pub t: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub kernel_distance: Vec<f64>,
    /// Slope of the capacitance-weighted mean voltage over the last tenth
    /// of the run (V/s).
    pub slope: f64,
    /// Predicted slope (Σu − Σd)/𝟙ᵀC𝟙 (V/s).
    pub predicted_slope: f64,
}

/// Integrates the Laplacian voltage dynamics with constant load `d` and
/// constant injection `u` from `v0`, recording every `record_every` steps.
#[allow(clippy::too_many_arguments)]
pub fn ramp_experiment(
    c: &[f64],
    l: &DMatrix<f64>,
    d: &[f64],
    u: &[f64],
    v0: &[f64],
    t_end: f64,
    h: f64,
    record_every: usize,
) -> Result<RampTrace> {
    let n = c.len();
    let mut rk = Rk4::new(n);
    let mut v = v0.to_vec();
    let steps = (t_end / h).round() as usize;
    let mut f = |_: f64, x: &[f64], dx: &mut [f64]| -> Result<()> {
        for i in 0..n {
            let lv: f64 = (0..n).map(|j| l[(i, j)] * x[j]).sum();
            dx[i] = (-lv - d[i] + u[i]) / c[i];
        }
        Ok(())
    };
    let ctot: f64 = c.iter().sum();
    let wmean = |x: &[f64]| x.iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>() / ctot;
    let mut tr = RampTrace {
        t: vec![0.0],
        v: vec![v.clone()],
        mean: vec![wmean(&v)],
        kernel_distance: vec![kernel_distance(&v)],
        slope: 0.0,
        predicted_slope: (u.iter().sum::<f64>() - d.iter().sum::<f64>()) / ctot,
    };
    let every = record_every.max(1);
    let tail_start = steps - steps / 10;
    let mut tail_mean = (0.0, 0.0);
    for k in 1..=steps {
        let t = (k - 1) as f64 * h;
        rk.step(&mut f, t, &mut v, h)?;
        if k == tail_start {
            tail_mean.0 = wmean(&v);
        }
        if k % every == 0 || k == steps {
            tr.t.push(k as f64 * h);
            tr.v.push(v.clone());
            tr.mean.push(wmean(&v));
            tr.kernel_distance.push(kernel_distance(&v));
        }
    }
    tail_mean.1 = wmean(&v);
    let span = (steps - tail_start) as f64 * h;
    tr.slope = if span > 0.0 { (tail_mean.1 - tail_mean.0) / span } else { 0.0 };
    Ok(tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Edge, Zip};

    fn two_node(r: f64) -> NetworkTopology {
        NetworkTopology::new(2, vec![Edge { from: 0, to: 1, resistance: r, inductance: 0.0 }]).unwrap()
    }

    #[test]
    fn two_node_pencil() {
        let l = two_node(0.1).laplacian().unwrap();
        let s = pencil_eigs(&[1.0, 1.0], &l).unwrap();
        assert!(s.eigenvalues[0].abs() < 1e-12);
        assert!((s.eigenvalues[1] - 20.0).abs() < 1e-12);
        let x0 = s.eigenvectors.column(0);
        assert!((x0[0] - x0[1]).abs() < 1e-12);
        assert_eq!(s.kernel_dimension(), 1);
    }

    #[test]
    fn pencil_scales_with_capacitance() {
        let l = two_node(0.1).laplacian().unwrap();
        let a = pencil_eigs(&[1.0, 1.0], &l).unwrap();
        let b = pencil_eigs(&[4.0, 4.0], &l).unwrap();
        assert!((b.eigenvalues[1] - a.eigenvalues[1] / 4.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_distance_examples() {
        assert_eq!(kernel_distance(&[3.0, 3.0, 3.0]), 0.0);
        assert!((kernel_distance(&[1.0, -1.0]) - 2.0_f64.sqrt()).abs() < 1e-15);
        let v = [561.0, 559.0, 560.0, 560.0, 560.0, 560.0];
        assert!((kernel_distance(&v) - 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn eta_two_node() {
        let l = two_node(0.1).laplacian().unwrap();
        let s = pencil_eigs(&[1.0, 1.0], &l).unwrap();
        assert!((eta_bound(&s, 20.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(eta_bound(&s, 0.0).unwrap(), 0.0);
        assert_eq!(transient_bound(&s, 0.0, 3.0).unwrap(), 0.0);
        let late = transient_bound(&s, 20.0, 10.0).unwrap();
        assert!((late - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eta_rejects_disconnected_spectrum() {
        let l = DMatrix::zeros(2, 2);
        let s = pencil_eigs(&[1.0, 1.0], &l).unwrap();
        assert!(eta_bound(&s, 1.0).is_err());
    }

    #[test]
    fn resistive_equilibrium_matches_closed_form() {
        let t = NetworkTopology::new(
            3,
            vec![
                Edge { from: 0, to: 1, resistance: 0.2, inductance: 0.0 },
                Edge { from: 1, to: 2, resistance: 0.5, inductance: 0.0 },
            ],
        )
        .unwrap();
        let g = [0.05, 0.1, 0.02];
        let loads: Vec<LoadModel> =
            g.iter().map(|x| LoadModel::exact(Zip { conductance: *x, current: 0.0, power: 0.0 }, 1.0)).collect();
        let inj = [30.0, 40.0, 20.0];
        let set = network_equilibrium(&t, &loads, &inj, 560.0, (0.0, 1e4)).unwrap();
        let mut m = t.laplacian().unwrap();
        for i in 0..3 {
            m[(i, i)] += g[i];
        }
        let exact = m.lu().solve(&DVector::from_column_slice(&inj)).unwrap();
        for i in 0..3 {
            assert!((set.primary().v_eq[i] - exact[i]).abs() <= 1e-10 * exact[i].abs());
        }
        assert!(!set.multiple);
    }

    #[test]
    fn zero_load_zero_injection_is_kernel() {
        let t = two_node(0.1);
        let loads = vec![LoadModel::exact(Zip::default(), 1.0); 2];
        let set = network_equilibrium(&t, &loads, &[0.0, 0.0], 560.0, (240.0, 800.0)).unwrap();
        let r = set.primary();
        assert!(r.kernel);
        assert!((r.v_eq[0] - 560.0).abs() < 1e-9 && (r.v_eq[1] - 560.0).abs() < 1e-9);
    }

    #[test]
    fn bergman_examples() {
        assert_eq!(bergman(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]), 0.0);
        assert!((bergman(&[2.0, 3.0], &[1.0, 2.0], &[1.0, 1.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ramp_slope_and_balance() {
        let l = two_node(0.1).laplacian().unwrap();
        let c = [1e-3, 1e-3];
        let tr = ramp_experiment(&c, &l, &[4.0, 10.0], &[10.0, 5.0], &[560.0, 560.0], 0.05, 1e-6, 100).unwrap();
        assert!((tr.predicted_slope - 500.0).abs() < 1e-9);
        assert!((tr.slope - 500.0).abs() < 0.5);
        let flat = ramp_experiment(&c, &l, &[5.0, 5.0], &[5.0, 5.0], &[550.0, 570.0], 0.05, 1e-6, 100).unwrap();
        assert!(flat.slope.abs() < 1e-6);
        let last = flat.v.last().unwrap();
        assert!((last[0] - 560.0).abs() < 1e-6 && (last[1] - 560.0).abs() < 1e-6);
    }
}
