//! Closed-loop simulation of the two-layer controlled network.
//!
//! Each sampling period runs the cycle: measure every voltage, build the
//! neighbour currents from that one measurement, solve all node problems
//! (concurrently, merged in node order), then integrate the network with
//! the references held for one period. Load steps take effect at the
//! nearest sample boundary and the true loads are redrawn once per sample
//! inside their uncertainty ball.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{kernel_distance, network_equilibrium_from};
use crate::error::{Error, Result};
use crate::integrate::Rk4;
use crate::mpc::{calibrate_kappa, LocalModel, NodeController, OcpProblem, OcpSpec, SampleRecord};
use crate::network::{ConverterParams, LoadModel, NetworkTopology, Zip};
use crate::primary;

/// How line currents are modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineDynamics {
    /// i_E = diag(1/r_e)·B·v (lines faster than everything else).
    Algebraic,
    /// L_e·di_e/dt = (B·v)_e − r_e·i_e.
    Dynamic,
}

impl std::str::FromStr for LineDynamics {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "algebraic" => Ok(LineDynamics::Algebraic),
            "dynamic" => Ok(LineDynamics::Dynamic),
            other => Err(Error::Parse(format!("unknown line dynamics '{other}' (algebraic|dynamic)"))),
        }
    }
}

/// A scheduled change of one node's nominal load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadStep {
    /// Time (s); rounded to the nearest sample boundary.
    pub time: f64,
    pub node: usize,
    pub load: Zip,
}

/// Pass thresholds for the run monitors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    /// |v − v*| bound at settled epochs (V).
    #[serde(default = "default_voltage_tolerance")]
    pub voltage_tolerance: f64,
    /// Power balance residual as a fraction of the drawn power.
    #[serde(default = "default_energy_tolerance")]
    pub energy_tolerance: f64,
    /// Current-limit slack relative to I_max.
    #[serde(default = "default_current_slack")]
    pub current_slack: f64,
    /// Run the paired frozen-w solve (value decrease, warm-start feasibility).
    #[serde(default = "default_true")]
    pub value_decrease: bool,
    /// Required fraction of samples with value decrease.
    #[serde(default = "default_decrease_fraction")]
    pub decrease_fraction: f64,
    /// Tolerance on V⁰(x⁺) − V⁰(x) + δ·ℓ.
    #[serde(default = "default_decrease_tolerance")]
    pub decrease_tolerance: f64,
    /// Samples before each load step (and before the end) treated as settled.
    #[serde(default = "default_settled_samples")]
    pub settled_samples: usize,
}

fn default_voltage_tolerance() -> f64 {
    10.0
}
fn default_energy_tolerance() -> f64 {
    0.01
}
fn default_current_slack() -> f64 {
    1e-9
}
fn default_true() -> bool {
    true
}
fn default_decrease_fraction() -> f64 {
    0.99
}
fn default_decrease_tolerance() -> f64 {
    1e-6
}
fn default_settled_samples() -> usize {
    10
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            voltage_tolerance: default_voltage_tolerance(),
            energy_tolerance: default_energy_tolerance(),
            current_slack: default_current_slack(),
            value_decrease: true,
            decrease_fraction: default_decrease_fraction(),
            decrease_tolerance: default_decrease_tolerance(),
            settled_samples: default_settled_samples(),
        }
    }
}

/// Complete, validated description of one closed-loop experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub topology: NetworkTopology,
    pub params: Vec<ConverterParams>,
    /// Initial nominal loads, uncertainty radii and cutoffs.
    pub loads: Vec<LoadModel>,
    /// Relative uncertainty γ_d: the true load is redrawn every sample
    /// uniformly in the ball of radius γ_d·|d̄| around the nominal load.
    pub uncertainty: f64,
    pub steps: Vec<LoadStep>,
    pub v_star: f64,
    pub v_bounds: (f64, f64),
    pub ocp: OcpSpec,
    /// Integration step; `None` picks one from the stiffness (at least 50
    /// steps per sample).
    pub step_size: Option<f64>,
    pub total_time: f64,
    pub line_dynamics: LineDynamics,
    pub seed: u64,
    /// Half-width of the seeded initial voltage spread around v* (V).
    pub initial_spread: f64,
    pub monitors: MonitorConfig,
}

impl Scenario {
    pub fn node_count(&self) -> usize {
        self.topology.node_count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if self.params.len() != n || self.loads.len() != n {
            return Err(Error::Config(format!(
                "{} nodes but {} converter and {} load entries",
                n,
                self.params.len(),
                self.loads.len()
            )));
        }
        for (i, p) in self.params.iter().enumerate() {
            p.validate().map_err(|e| Error::Config(format!("node {i}: {e}")))?;
        }
        for (i, l) in self.loads.iter().enumerate() {
            l.validate().map_err(|e| Error::Config(format!("node {i}: {e}")))?;
        }
        self.ocp.validate()?;
        if !(self.v_bounds.0 < self.v_star && self.v_star < self.v_bounds.1) {
            return Err(Error::Config(format!(
                "v* = {} V must lie inside the voltage band [{}, {}] V",
                self.v_star, self.v_bounds.0, self.v_bounds.1
            )));
        }
        if !(self.total_time > 0.0) {
            return Err(Error::Config("total time must be > 0".into()));
        }
        if !(self.uncertainty >= 0.0) {
            return Err(Error::Config("uncertainty must be ≥ 0".into()));
        }
        if let Some(h) = self.step_size {
            if !(h > 0.0 && h <= self.ocp.sample_time / 10.0) {
                return Err(Error::Config(format!(
                    "integration step {h} s must be positive and at most δ/10 = {} s",
                    self.ocp.sample_time / 10.0
                )));
            }
        }
        for s in &self.steps {
            if s.node >= n {
                return Err(Error::Config(format!("load step names node {} of {n}", s.node)));
            }
            if !(s.time >= 0.0 && s.time <= self.total_time) {
                return Err(Error::Config(format!("load step at {} s lies outside [0, {}] s", s.time, self.total_time)));
            }
            let mut l = self.loads[s.node];
            l.nominal = s.load;
            l.actual = s.load;
            l.validate().map_err(|e| Error::Config(format!("load step at {} s: {e}", s.time)))?;
        }
        if self.line_dynamics == LineDynamics::Dynamic {
            if let Some(e) = self.topology.edges().iter().find(|e| !(e.inductance > 0.0)) {
                return Err(Error::Config(format!(
                    "dynamic lines need L_e > 0; edge ({}, {}) has {}",
                    e.from, e.to, e.inductance
                )));
            }
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        (self.total_time / self.ocp.sample_time).round() as usize
    }

    /// Sample index at which a step takes effect.
    pub fn step_sample(&self, step: &LoadStep) -> usize {
        (step.time / self.ocp.sample_time).round() as usize
    }

    /// Local model of node `i` with nominal load `nominal`.
    pub fn local_model(&self, i: usize, l_ii: f64, nominal: Zip) -> LocalModel {
        LocalModel {
            params: self.params[i],
            l_ii,
            nominal,
            v_bounds: self.v_bounds,
            v_min_load: self.loads[i].v_min_load,
        }
    }

    /// Integration substeps per sample.
    pub fn substeps(&self) -> Result<usize> {
        let delta = self.ocp.sample_time;
        if let Some(h) = self.step_size {
            return Ok(((delta / h).round() as usize).max(1));
        }
        let l = self.topology.laplacian()?;
        let mut rho: f64 = 0.0;
        for (i, p) in self.params.iter().enumerate() {
            rho = rho.max(2.0 * l[(i, i)] / p.capacitance);
            rho = rho.max((p.resistance + p.k_p) / p.inductance);
        }
        if self.line_dynamics == LineDynamics::Dynamic {
            for e in self.topology.edges() {
                rho = rho.max(e.resistance / e.inductance);
            }
        }
        Ok(((delta * rho).ceil() as usize).max(50))
    }
}

/// State vector layout [v (n), ĩ (n), σ (n), i_E (m, dynamic lines only)].
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    m: usize,
    dynamic: bool,
}

impl Layout {
    fn dim(&self) -> usize {
        3 * self.n + if self.dynamic { self.m } else { 0 }
    }
}

/// Right-hand side of the full closed loop for given current references
/// (i_ref, A) and true loads.
pub fn closed_loop_rhs(
    scenario: &Scenario,
    y: &[f64],
    refs: &[f64],
    loads: &[Zip],
    out: &mut [f64],
) -> Result<()> {
    let n = scenario.node_count();
    let dynamic = scenario.line_dynamics == LineDynamics::Dynamic;
    let lay = Layout { n, m: scenario.topology.edge_count(), dynamic };
    let net = NetworkTerms::new(scenario)?;
    net.rhs(scenario, lay, y, refs, loads, out)
}

/// Precomputed network matrices used in the inner loop.
#[derive(Debug, Clone)]
struct NetworkTerms {
    laplacian: DMatrix<f64>,
    edges: Vec<(usize, usize, f64, f64)>,
}

impl NetworkTerms {
    fn new(scenario: &Scenario) -> Result<Self> {
        Ok(NetworkTerms {
            laplacian: scenario.topology.laplacian()?,
            edges: scenario.topology.edges().iter().map(|e| (e.from, e.to, e.resistance, e.inductance)).collect(),
        })
    }

    /// Current leaving each node through the lines.
    fn outflow(&self, lay: Layout, y: &[f64], out: &mut [f64]) {
        let n = lay.n;
        out[..n].fill(0.0);
        if lay.dynamic {
            for (k, (a, b, _, _)) in self.edges.iter().enumerate() {
                let i = y[3 * n + k];
                out[*a] += i;
                out[*b] -= i;
            }
        } else {
            for (a, b, r, _) in &self.edges {
                let i = (y[*a] - y[*b]) / r;
                out[*a] += i;
                out[*b] -= i;
            }
        }
    }

    fn rhs(&self, s: &Scenario, lay: Layout, y: &[f64], refs: &[f64], loads: &[Zip], out: &mut [f64]) -> Result<()> {
        let n = lay.n;
        let mut flow = vec![0.0; n];
        self.outflow(lay, y, &mut flow);
        for i in 0..n {
            let p = &s.params[i];
            let v = y[i];
            if loads[i].power > 0.0 && v <= s.loads[i].v_min_load {
                return Err(Error::Singularity { v, cutoff: s.loads[i].v_min_load });
            }
            let (it, sg) = (y[n + i], y[2 * n + i]);
            out[i] = (it + p.i_s() - loads[i].current_at(v) - flow[i]) / p.capacitance;
            let (di, ds) = primary::primary_rhs(it, sg, refs[i] - p.i_s(), p);
            out[n + i] = di;
            out[2 * n + i] = ds;
        }
        if lay.dynamic {
            for (k, (a, b, r, l)) in self.edges.iter().enumerate() {
                out[3 * n + k] = (y[*a] - y[*b] - r * y[3 * n + k]) / l;
            }
        }
        Ok(())
    }

    /// Σ r_e·i_e² for the current state.
    fn line_losses(&self, lay: Layout, y: &[f64]) -> f64 {
        self.edges
            .iter()
            .enumerate()
            .map(|(k, (a, b, r, _))| {
                let i = if lay.dynamic { y[3 * lay.n + k] } else { (y[*a] - y[*b]) / r };
                r * i * i
            })
            .sum()
    }
}

/// One output row of the trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub v: Vec<f64>,
    pub i_tilde: Vec<f64>,
    pub sigma: Vec<f64>,
    pub i_ref: Vec<f64>,
    /// Power drawn by each load (W).
    pub p_load: Vec<f64>,
    /// Power provided by each converter v·(ĩ + i_s) (W).
    pub p_provided: Vec<f64>,
    /// Σ r_e·i_e² (W).
    pub line_losses: f64,
    pub kernel_distance: f64,
    /// Latest value V⁰ of each node problem.
    pub value: Vec<f64>,
    /// ‖v_eq − v‖ for the equilibrium of the current targets.
    pub eq_gap: f64,
    /// ‖v_eq − v*·𝟙‖.
    pub eq_offset: f64,
    /// |ĩ − u_eq| per node.
    pub current_deviation: Vec<f64>,
}

/// Uniformly sampled time series of every recorded channel.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

/// Verdict of one run monitor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitorResult {
    pub name: String,
    pub pass: bool,
    /// Worst observed value of the monitored quantity.
    pub worst: f64,
    pub limit: f64,
    pub detail: String,
}

/// Extremal statistics over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RunStats {
    /// max_i,t |ĩ_i|/I_max,i.
    pub max_current_ratio: f64,
    /// max_i,t |v_i − v*| (V).
    pub max_voltage_deviation: f64,
    /// max_t kernel distance (V).
    pub max_kernel_distance: f64,
    /// max over monitored samples of V⁰(x⁺) − V⁰(x) + δ·ℓ.
    pub worst_decrease_margin: f64,
    pub integration_steps: usize,
    pub samples: usize,
}

/// Everything a run produces. When the integration fails the trace is kept
/// up to the failure and `failure` carries the diagnostic.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    /// Voltages at every sample instant kδ (k = 0..K).
    pub sample_voltages: Vec<Vec<f64>>,
    pub mpc_log: Vec<SampleRecord>,
    pub monitors: Vec<MonitorResult>,
    pub stats: RunStats,
    /// Per-node terminal weight κ_ψ used by the controllers.
    pub kappa: Vec<f64>,
    pub substeps: usize,
    pub failure: Option<Error>,
    pub wall_clock: f64,
}

impl RunOutput {
    pub fn all_pass(&self) -> bool {
        self.failure.is_none() && self.monitors.iter().all(|m| m.pass)
    }

    pub fn monitor(&self, name: &str) -> Option<&MonitorResult> {
        self.monitors.iter().find(|m| m.name == name)
    }
}

/// Draws a load uniformly from the ball of radius γ·|d̄| around d̄ in the
/// subspace of its nonzero components, clipped at zero.
fn draw_load(rng: &mut ChaCha8Rng, nominal: &Zip, gamma: f64) -> Zip {
    let base = nominal.as_array();
    let radius = gamma * nominal.distance(&Zip::default());
    if radius == 0.0 {
        return *nominal;
    }
    let active: Vec<usize> = (0..3).filter(|k| base[*k] != 0.0).collect();
    let dim = active.len();
    // Rejection sampling from the enclosing cube.
    let dir = loop {
        let d: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        if d.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            break d;
        }
    };
    let mut out = base;
    for (j, k) in active.iter().enumerate() {
        out[*k] = (base[*k] + radius * dir[j]).max(0.0);
    }
    Zip::from_array(out)
}

/// Runs the closed loop.
pub fn run(scenario: &Scenario) -> Result<RunOutput> {
    run_with(scenario, 1)
}

/// [`run`] recording one trace row every `decimation` integration steps.
pub fn run_with(scenario: &Scenario, decimation: usize) -> Result<RunOutput> {
    scenario.validate()?;
    let started = Instant::now();
    let n = scenario.node_count();
    let decimation = decimation.max(1);
    let delta = scenario.ocp.sample_time;
    let samples = scenario.sample_count();
    let substeps = scenario.substeps()?;
    let h = delta / substeps as f64;
    let dynamic = scenario.line_dynamics == LineDynamics::Dynamic;
    let lay = Layout { n, m: scenario.topology.edge_count(), dynamic };
    let net = NetworkTerms::new(scenario)?;
    let l = &net.laplacian;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);

    // Controllers, each with its own calibrated terminal weight.
    let mut nominal: Vec<Zip> = scenario.loads.iter().map(|l| l.nominal).collect();
    let mut controllers = Vec::with_capacity(n);
    let mut kappa = Vec::with_capacity(n);
    for i in 0..n {
        let model = scenario.local_model(i, l[(i, i)], nominal[i]);
        let mut spec = scenario.ocp;
        if spec.kappa == 0.0 {
            let w0 = l[(i, i)] * scenario.v_star;
            let x0 = [scenario.v_star, 0.0, 0.0];
            let problem = OcpProblem::new(model, spec, x0, w0, scenario.v_star)?;
            spec.kappa = calibrate_kappa(&problem)?.kappa;
        }
        kappa.push(spec.kappa);
        controllers.push(NodeController::new(i, model, spec, scenario.v_star, scenario.monitors.value_decrease));
    }

    // Initial state.
    let mut y = vec![0.0; lay.dim()];
    for i in 0..n {
        y[i] = scenario.v_star + scenario.initial_spread * rng.random_range(-1.0..=1.0);
    }
    if dynamic {
        for (k, (a, b, r, _)) in net.edges.iter().enumerate() {
            y[3 * n + k] = (y[*a] - y[*b]) / r;
        }
    }

    let mut step_at: Vec<Vec<(usize, Zip)>> = vec![Vec::new(); samples + 1];
    for s in &scenario.steps {
        step_at[scenario.step_sample(s).min(samples)].push((s.node, s.load));
    }

    let mut trace = Trace::default();
    let mut sample_voltages = Vec::with_capacity(samples + 1);
    let mut mpc_log = Vec::with_capacity(samples * n);
    let mut stats = RunStats { worst_decrease_margin: f64::NEG_INFINITY, ..Default::default() };
    let mut worst_slack = f64::NEG_INFINITY;
    let mut settled_dev: Vec<(usize, f64)> = Vec::new();
    let mut rk = Rk4::new(lay.dim());
    let mut refs = vec![0.0; n];
    let mut u_eq = vec![0.0; n];
    let mut values = vec![f64::NAN; n];
    let mut v_eq_prev: Option<Vec<f64>> = None;
    let mut failure = None;
    let settled = settled_windows(scenario, samples);
    let settled_count: usize = settled.iter().map(|w| w.len()).sum();
    // Per window: Σ(provided − drawn − losses), Σ drawn, number of steps.
    let mut energy: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); settled.len()];

    let mut step_index = 0usize;
    'outer: for k in 0..=samples {
        let t = k as f64 * delta;
        for (node, load) in &step_at[k] {
            nominal[*node] = *load;
            controllers[*node].set_nominal(*load);
        }
        let actual: Vec<Zip> = nominal.iter().map(|d| draw_load(&mut rng, d, scenario.uncertainty)).collect();
        sample_voltages.push(y[..n].to_vec());

        // Voltage regulation is checked at the settled sample instants.
        let window = settled.iter().position(|w| w.contains(&k));
        if window.is_some() {
            let dev = y[..n].iter().map(|v| (v - scenario.v_star).abs()).fold(0.0, f64::max);
            settled_dev.push((k, dev));
        }
        if k == samples {
            record_row(scenario, &net, lay, t, &y, &refs, &actual, &values, &u_eq, &mut v_eq_prev, &mut trace);
            break;
        }

        // Measurement exchange: w_i = Σ_{j≠i} v_j / r_ij from this instant only.
        let v_meas = DVector::from_column_slice(&y[..n]);
        let lv = l * &v_meas;
        let w: Vec<f64> = (0..n).map(|i| l[(i, i)] * v_meas[i] - lv[i]).collect();
        let states: Vec<[f64; 3]> = (0..n).map(|i| [y[i], y[n + i], y[2 * n + i]]).collect();

        let results: Vec<Result<crate::mpc::StepOutput>> = std::thread::scope(|scope| {
            let handles: Vec<_> = controllers
                .iter_mut()
                .enumerate()
                .map(|(i, c)| {
                    let (x, wi) = (states[i], w[i]);
                    scope.spawn(move || c.step(k, x, wi))
                })
                .collect();
            handles.into_iter().map(|hd| hd.join().expect("node solver panicked")).collect()
        });
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(out) => {
                    refs[i] = out.i_ref;
                    u_eq[i] = out.u_eq;
                    values[i] = out.record.value;
                    if let Some(m) = out.record.decrease_margin {
                        stats.worst_decrease_margin = stats.worst_decrease_margin.max(m);
                    }
                    mpc_log.push(out.record);
                }
                Err(e) => {
                    failure = Some(Error::Numerical(format!("node {i} at sample {k}: {e}")));
                    break 'outer;
                }
            }
        }

        for sub in 0..substeps {
            if let Some(j) = window {
                // Window averages cancel the capacitor storage term.
                let drawn: f64 = (0..n).map(|i| actual[i].power_at(y[i])).sum();
                let provided: f64 = (0..n).map(|i| y[i] * (y[n + i] + scenario.params[i].i_s())).sum();
                energy[j].0 += provided - drawn - net.line_losses(lay, &y);
                energy[j].1 += drawn;
                energy[j].2 += 1;
            }
            if step_index.is_multiple_of(decimation) {
                record_row(scenario, &net, lay, t + sub as f64 * h, &y, &refs, &actual, &values, &u_eq, &mut v_eq_prev, &mut trace);
            }
            let mut f = |_t: f64, yy: &[f64], d: &mut [f64]| net.rhs(scenario, lay, yy, &refs, &actual, d);
            if let Err(e) = rk.step(&mut f, t + sub as f64 * h, &mut y, h) {
                failure = Some(e);
                break 'outer;
            }
            step_index += 1;
            if y.iter().any(|x| !x.is_finite()) {
                failure = Some(Error::Divergence { t: t + (sub + 1) as f64 * h, last_finite: Vec::new() });
                break 'outer;
            }
            for i in 0..n {
                let p = &scenario.params[i];
                let ratio = y[n + i].abs() / p.i_max;
                stats.max_current_ratio = stats.max_current_ratio.max(ratio);
                worst_slack = worst_slack.max((y[n + i].abs() - p.half_range()) / p.i_max);
                stats.max_voltage_deviation = stats.max_voltage_deviation.max((y[i] - scenario.v_star).abs());
            }
            stats.max_kernel_distance = stats.max_kernel_distance.max(kernel_distance(&y[..n]));
        }
    }
    stats.integration_steps = step_index;
    stats.samples = sample_voltages.len();

    let mut monitors = Vec::new();
    let cfg = &scenario.monitors;
    monitors.push(MonitorResult {
        name: "current-limit".into(),
        pass: worst_slack <= cfg.current_slack && failure.is_none(),
        worst: worst_slack,
        limit: cfg.current_slack,
        detail: format!("max |ĩ|/I_max = {:.6}", stats.max_current_ratio),
    });
    let (worst_dev_k, worst_dev) = settled_dev.iter().copied().fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    monitors.push(MonitorResult {
        name: "voltage-regulation".into(),
        pass: settled_dev.len() == settled_count && worst_dev <= cfg.voltage_tolerance,
        worst: worst_dev,
        limit: cfg.voltage_tolerance,
        detail: format!("{} settled samples, worst at sample {worst_dev_k}", settled_dev.len()),
    });
    let complete = energy.iter().filter(|e| e.2 > 0).count();
    let worst_energy = energy
        .iter()
        .filter(|e| e.2 > 0)
        .map(|(r, d, _)| r.abs() / d.max(1e-12))
        .fold(0.0, f64::max);
    monitors.push(MonitorResult {
        name: "energy-balance".into(),
        pass: complete == settled.iter().filter(|w| w.iter().any(|k| *k < samples)).count()
            && complete > 0
            && worst_energy <= cfg.energy_tolerance,
        worst: worst_energy,
        limit: cfg.energy_tolerance,
        detail: format!("{complete} settled windows, averaged over each window"),
    });
    if cfg.value_decrease {
        let checked: Vec<&SampleRecord> = mpc_log.iter().filter(|r| r.warm_start_feasible.is_some()).collect();
        let decreased = checked
            .iter()
            .filter(|r| r.decrease_margin.is_some_and(|m| m <= cfg.decrease_tolerance))
            .count();
        let fraction = if checked.is_empty() { 0.0 } else { decreased as f64 / checked.len() as f64 };
        monitors.push(MonitorResult {
            name: "value-decrease".into(),
            pass: !checked.is_empty() && fraction >= cfg.decrease_fraction,
            worst: fraction,
            limit: cfg.decrease_fraction,
            detail: format!("{decreased}/{} frozen-w samples decrease", checked.len()),
        });
        let warm_ok = checked.iter().filter(|r| r.warm_start_feasible == Some(true)).count();
        monitors.push(MonitorResult {
            name: "warm-start-feasibility".into(),
            pass: !checked.is_empty() && warm_ok == checked.len(),
            worst: if checked.is_empty() { 0.0 } else { warm_ok as f64 / checked.len() as f64 },
            limit: 1.0,
            detail: format!("{warm_ok}/{} shifted warm starts feasible", checked.len()),
        });
    }
    if !stats.worst_decrease_margin.is_finite() {
        stats.worst_decrease_margin = 0.0;
    }

    Ok(RunOutput {
        trace,
        sample_voltages,
        mpc_log,
        monitors,
        stats,
        kappa,
        substeps,
        failure,
        wall_clock: started.elapsed().as_secs_f64(),
    })
}

/// Settled windows: the last `settled_samples` samples before every load
/// step and before the end of the run, one window per epoch.
pub fn settled_windows(scenario: &Scenario, samples: usize) -> Vec<Vec<usize>> {
    let m = scenario.monitors.settled_samples.max(1);
    let mut ends: Vec<usize> = scenario.steps.iter().map(|s| scenario.step_sample(s)).filter(|k| *k > 0).collect();
    ends.push(samples + 1);
    ends.sort_unstable();
    ends.dedup();
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut taken = 0;
    for e in ends {
        let w: Vec<usize> = (e.saturating_sub(m).max(taken)..e).filter(|k| *k <= samples).collect();
        if let Some(last) = w.last() {
            taken = last + 1;
            out.push(w);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn record_row(
    scenario: &Scenario,
    net: &NetworkTerms,
    lay: Layout,
    t: f64,
    y: &[f64],
    refs: &[f64],
    actual: &[Zip],
    values: &[f64],
    u_eq: &[f64],
    v_eq_prev: &mut Option<Vec<f64>>,
    trace: &mut Trace,
) {
    let n = lay.n;
    let v = y[..n].to_vec();
    // Equilibrium of the true network for the controllers' current targets.
    let loads: Vec<LoadModel> = (0..n)
        .map(|i| LoadModel { actual: actual[i], nominal: actual[i], ..scenario.loads[i] })
        .collect();
    let inj: Vec<f64> = (0..n).map(|i| u_eq[i] + scenario.params[i].i_s()).collect();
    let starts: Vec<Vec<f64>> = v_eq_prev.iter().cloned().collect();
    let (eq_gap, eq_offset) =
        match network_equilibrium_from(&scenario.topology, &loads, &inj, scenario.v_star, scenario.v_bounds, &starts) {
            Ok(set) => {
                let v_eq = set.primary().v_eq.clone();
                let gap = v_eq.iter().zip(v.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let off = v_eq.iter().map(|a| (a - scenario.v_star).powi(2)).sum::<f64>().sqrt();
                *v_eq_prev = Some(v_eq);
                (gap, off)
            }
            Err(_) => (f64::NAN, f64::NAN),
        };
    trace.rows.push(TraceRow {
        t,
        v: v.clone(),
        i_tilde: y[n..2 * n].to_vec(),
        sigma: y[2 * n..3 * n].to_vec(),
        i_ref: refs.to_vec(),
        p_load: (0..n).map(|i| actual[i].power_at(v[i])).collect(),
        p_provided: (0..n).map(|i| v[i] * (y[n + i] + scenario.params[i].i_s())).collect(),
        line_losses: net.line_losses(lay, y),
        kernel_distance: kernel_distance(&v),
        value: values.to_vec(),
        eq_gap,
        eq_offset,
        current_deviation: (0..n).map(|i| (y[n + i] - u_eq[i]).abs()).collect(),
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Edge;

    fn two_node(power: f64) -> Scenario {
        let p = ConverterParams {
            inductance: 1.8e-3,
            resistance: 0.2,
            capacitance: 22e-3,
            v_in: 800.0,
            i_max: 178.7,
            k_p: 2.0,
            k_i: 500.0,
        };
        Scenario {
            name: "two".into(),
            topology: NetworkTopology::new(2, vec![Edge { from: 0, to: 1, resistance: 0.5, inductance: 0.0 }]).unwrap(),
            params: vec![p, p],
            loads: vec![LoadModel::exact(Zip::cpl(power), 40.0); 2],
            uncertainty: 0.0,
            steps: vec![],
            v_star: 560.0,
            v_bounds: (240.0, 800.0),
            ocp: OcpSpec::default(),
            step_size: None,
            total_time: 0.05,
            line_dynamics: LineDynamics::Algebraic,
            seed: 1,
            initial_spread: 0.0,
            monitors: MonitorConfig::default(),
        }
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let s = two_node(30_000.0);
        let p = s.params[0];
        let u = 30_000.0 / 560.0 - p.i_s();
        let (it, sg) = primary::equilibrium(u, &p);
        let y = vec![560.0, 560.0, it, it, sg, sg];
        let mut d = vec![0.0; 6];
        closed_loop_rhs(&s, &y, &[u + p.i_s(); 2], &[Zip::cpl(30_000.0); 2], &mut d).unwrap();
        assert!(d.iter().all(|x| x.abs() < 1e-9), "{d:?}");
    }

    #[test]
    fn laplacian_term_conserves_charge() {
        let s = two_node(0.0);
        let y = vec![570.0, 550.0, 3.0, -7.0, 0.1, -0.2];
        let mut d = vec![0.0; 6];
        closed_loop_rhs(&s, &y, &[0.0; 2], &[Zip::default(); 2], &mut d).unwrap();
        let p = s.params[0];
        let lhs = p.capacitance * (d[0] + d[1]);
        let rhs = (3.0 + p.i_s()) + (-7.0 + p.i_s());
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn singular_load_is_reported() {
        let s = two_node(10_000.0);
        let y = vec![30.0, 560.0, 0.0, 0.0, 0.0, 0.0];
        let mut d = vec![0.0; 6];
        let err = closed_loop_rhs(&s, &y, &[0.0; 2], &[Zip::cpl(10_000.0); 2], &mut d).unwrap_err();
        assert!(matches!(err, Error::Singularity { .. }));
    }

    #[test]
    fn settled_samples_precede_steps() {
        let mut s = two_node(1.0);
        s.total_time = 0.1;
        s.steps = vec![LoadStep { time: 0.05, node: 0, load: Zip::cpl(2.0) }];
        s.monitors.settled_samples = 2;
        assert_eq!(settled_windows(&s, 20), vec![vec![8, 9], vec![19, 20]]);
    }

    #[test]
    fn short_run_regulates() {
        let out = run(&two_node(30_000.0)).unwrap();
        assert!(out.failure.is_none(), "{:?}", out.failure);
        let last = out.sample_voltages.last().unwrap();
        assert!(last.iter().all(|v| (v - 560.0).abs() < 1.0), "{last:?}");
    }
}
