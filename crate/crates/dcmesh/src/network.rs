//! Converter network model: graph, incidence matrix, weighted Laplacian,
//! converter constants, ZIP loads and the time-scale separation check.
//!
//! Node ids are dense in `0..node_count`. Each edge is an RL line with
//! resistance `r_e > 0` and inductance `L_e ≥ 0`. The Laplacian is
//! `ℒ = Bᵀ diag(1/r_e) B` and does not depend on edge orientation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One RL power line between two converters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Line resistance r_e (Ω).
    pub resistance: f64,
    /// Line inductance L_e (H).
    #[serde(default)]
    pub inductance: f64,
}

/// Validated, immutable network graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    node_count: usize,
    edges: Vec<Edge>,
}

impl NetworkTopology {
    /// Builds a topology, checking ids, self-loops, duplicate lines,
    /// line parameters and connectivity.
    pub fn new(node_count: usize, edges: Vec<Edge>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::Config("network must have at least one node".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (k, e) in edges.iter().enumerate() {
            if e.from >= node_count || e.to >= node_count {
                return Err(Error::Config(format!(
                    "edge {k} ({} -> {}) references a node outside 0..{node_count}",
                    e.from, e.to
                )));
            }
            if e.from == e.to {
                return Err(Error::Config(format!("edge {k} is a self-loop on node {}", e.from)));
            }
            if !(e.resistance > 0.0) || !e.resistance.is_finite() {
                return Err(Error::Parameter(format!(
                    "edge {k} ({} -> {}) has resistance {} Ω; it must be > 0",
                    e.from, e.to, e.resistance
                )));
            }
            if !(e.inductance >= 0.0) || !e.inductance.is_finite() {
                return Err(Error::Parameter(format!(
                    "edge {k} ({} -> {}) has inductance {} H; it must be ≥ 0",
                    e.from, e.to, e.inductance
                )));
            }
            let key = (e.from.min(e.to), e.from.max(e.to));
            if !seen.insert(key) {
                return Err(Error::Config(format!(
                    "edge {k} duplicates the line between nodes {} and {}",
                    key.0, key.1
                )));
            }
        }
        let topo = NetworkTopology { node_count, edges };
        let comps = topo.components();
        if comps.len() > 1 {
            let names: Vec<String> = comps.iter().map(|c| format!("{c:?}")).collect();
            return Err(Error::Config(format!(
                "network is disconnected; components: {}",
                names.join(", ")
            )));
        }
        Ok(topo)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbour ids of node `i`, ascending.
    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        let mut n: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|e| {
                if e.from == i {
                    Some(e.to)
                } else if e.to == i {
                    Some(e.from)
                } else {
                    None
                }
            })
            .collect();
        n.sort_unstable();
        n
    }

    /// Connected components as sorted node lists.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut label = vec![usize::MAX; self.node_count];
        let mut comps = Vec::new();
        for start in 0..self.node_count {
            if label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut stack = vec![start];
            let mut members = Vec::new();
            label[start] = id;
            while let Some(n) = stack.pop() {
                members.push(n);
                for m in self.neighbours(n) {
                    if label[m] == usize::MAX {
                        label[m] = id;
                        stack.push(m);
                    }
                }
            }
            members.sort_unstable();
            comps.push(members);
        }
        comps
    }

    /// Signed incidence matrix |ℰ|×|𝒱|: +1 at the source, −1 at the sink.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.edges.len(), self.node_count);
        for (k, e) in self.edges.iter().enumerate() {
            b[(k, e.from)] = 1.0;
            b[(k, e.to)] = -1.0;
        }
        b
    }

    /// Weighted Laplacian ℒ = Bᵀ diag(1/r_e) B, assembled edge by edge.
    pub fn laplacian(&self) -> Result<DMatrix<f64>> {
        let n = self.node_count;
        let mut l = DMatrix::zeros(n, n);
        for e in &self.edges {
            if !(e.resistance > 0.0) {
                return Err(Error::Parameter(format!(
                    "edge {} -> {} has non-positive resistance {}",
                    e.from, e.to, e.resistance
                )));
            }
            let y = 1.0 / e.resistance;
            l[(e.from, e.from)] += y;
            l[(e.to, e.to)] += y;
            l[(e.from, e.to)] -= y;
            l[(e.to, e.from)] -= y;
        }
        Ok(l)
    }

    /// Line conductances 1/r_e in edge order.
    pub fn conductances(&self) -> Vec<f64> {
        self.edges.iter().map(|e| 1.0 / e.resistance).collect()
    }
}

/// Free function form of [`NetworkTopology::incidence`].
pub fn build_incidence(topology: &NetworkTopology) -> DMatrix<f64> {
    topology.incidence()
}

/// Free function form of [`NetworkTopology::laplacian`].
pub fn laplacian(topology: &NetworkTopology) -> Result<DMatrix<f64>> {
    topology.laplacian()
}

/// Electrical and controller constants of one buck converter.
///
/// The shift current `i_s = I_max/2` and the integrator authority
/// `M = ½(r + k_P)·I_max` are derived, so they are always consistent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConverterParams {
    /// Filter inductance L (H).
    pub inductance: f64,
    /// Parasitic resistance r (Ω).
    pub resistance: f64,
    /// Output capacitance C (F).
    pub capacitance: f64,
    /// Input voltage V_in (V).
    pub v_in: f64,
    /// Current bound I_max (A); the converter current lives in [0, I_max].
    pub i_max: f64,
    /// Proportional gain k_P (Ω).
    pub k_p: f64,
    /// Integral gain k_I.
    pub k_i: f64,
}

impl ConverterParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("inductance", self.inductance),
            ("resistance", self.resistance),
            ("capacitance", self.capacitance),
            ("v_in", self.v_in),
            ("i_max", self.i_max),
            ("k_p", self.k_p),
            ("k_i", self.k_i),
        ];
        for (name, value) in fields {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::Parameter(format!("converter {name} = {value}; it must be > 0")));
            }
        }
        Ok(())
    }

    /// Shift current i_s = I_max/2.
    pub fn i_s(&self) -> f64 {
        0.5 * self.i_max
    }

    /// Integrator authority M = ½(r + k_P)·I_max.
    pub fn m(&self) -> f64 {
        0.5 * (self.resistance + self.k_p) * self.i_max
    }

    /// Half-width of the admissible shifted current and reference, I_max/2.
    pub fn half_range(&self) -> f64 {
        0.5 * self.i_max
    }
}

/// ZIP load parameters d = (1/R_L, I_L, P_L).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Zip {
    /// Constant-impedance part 1/R_L (S).
    #[serde(default)]
    pub conductance: f64,
    /// Constant-current part I_L (A).
    #[serde(default)]
    pub current: f64,
    /// Constant-power part P_L (W).
    #[serde(default)]
    pub power: f64,
}

impl Zip {
    pub fn cpl(power: f64) -> Self {
        Zip { conductance: 0.0, current: 0.0, power }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.conductance, self.current, self.power]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Zip { conductance: a[0], current: a[1], power: a[2] }
    }

    /// g(v)·d = v/R_L + I_L + P_L/v, without the cutoff check.
    pub fn current_at(&self, v: f64) -> f64 {
        self.conductance * v + self.current + self.power / v
    }

    /// ∂(g(v)·d)/∂v = 1/R_L − P_L/v².
    pub fn slope_at(&self, v: f64) -> f64 {
        self.conductance - self.power / (v * v)
    }

    /// Drawn power v·(g(v)·d).
    pub fn power_at(&self, v: f64) -> f64 {
        v * self.current_at(v)
    }

    /// Euclidean distance between two parameter vectors.
    pub fn distance(&self, other: &Zip) -> f64 {
        let a = self.as_array();
        let b = other.as_array();
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    fn is_nonnegative(&self) -> bool {
        self.as_array().iter().all(|x| *x >= 0.0 && x.is_finite())
    }
}

/// Load at one node: true and nominal ZIP parameters, the uncertainty
/// radius, the admissible box and the voltage cutoff below which the
/// constant-power part is treated as singular.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadModel {
    pub actual: Zip,
    pub nominal: Zip,
    /// Radius γ_d bounding |d̄ − d|.
    pub uncertainty: f64,
    /// Upper corner of the admissible box 𝔻 = [0, upper]; `None` means unbounded.
    pub upper: Option<Zip>,
    /// Voltage cutoff v_min_load (V).
    pub v_min_load: f64,
}

impl LoadModel {
    /// Load whose true parameters equal the nominal ones.
    pub fn exact(nominal: Zip, v_min_load: f64) -> Self {
        LoadModel { actual: nominal, nominal, uncertainty: 0.0, upper: None, v_min_load }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.actual.is_nonnegative() || !self.nominal.is_nonnegative() {
            return Err(Error::Parameter("load parameters must be finite and ≥ 0".into()));
        }
        if !(self.v_min_load > 0.0) {
            return Err(Error::Parameter(format!(
                "load voltage cutoff {} V must be > 0",
                self.v_min_load
            )));
        }
        if !(self.uncertainty >= 0.0) {
            return Err(Error::Parameter("load uncertainty radius must be ≥ 0".into()));
        }
        let gap = self.actual.distance(&self.nominal);
        if gap > self.uncertainty * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::Parameter(format!(
                "|d̄ − d| = {gap} exceeds the uncertainty radius {}",
                self.uncertainty
            )));
        }
        if let Some(up) = self.upper {
            for d in [self.actual, self.nominal] {
                let (a, u) = (d.as_array(), up.as_array());
                if a.iter().zip(u.iter()).any(|(x, y)| x > y) {
                    return Err(Error::Parameter(format!(
                        "load {d:?} lies outside the admissible box [0, {up:?}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Current drawn at voltage `v` using the true (`use_nominal = false`)
    /// or nominal parameters.
    pub fn load_current(&self, v: f64, use_nominal: bool) -> Result<f64> {
        let d = if use_nominal { self.nominal } else { self.actual };
        if d.power > 0.0 && v <= self.v_min_load {
            return Err(Error::Singularity { v, cutoff: self.v_min_load });
        }
        if d.power == 0.0 && d.current == 0.0 && d.conductance == 0.0 {
            return Ok(0.0);
        }
        Ok(d.current_at(v))
    }
}

/// Free function form of [`LoadModel::load_current`].
pub fn load_current(load: &LoadModel, v: f64, use_nominal: bool) -> Result<f64> {
    load.load_current(v, use_nominal)
}

/// Full network state: node voltages, shifted currents, integrator
/// states and (optionally) line currents.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub v: Vec<f64>,
    pub i_tilde: Vec<f64>,
    pub sigma: Vec<f64>,
    pub i_line: Option<Vec<f64>>,
}

/// Constraint membership of one node state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub voltage: bool,
    pub current: bool,
    pub integrator: bool,
}

impl Membership {
    pub fn all(&self) -> bool {
        self.voltage && self.current && self.integrator
    }
}

impl NetworkState {
    /// Checks v_i ∈ [v_lo, v_hi], |ĩ_i| ≤ I_max/2 and |σ_i| ≤ π/2.
    pub fn membership(&self, i: usize, params: &ConverterParams, v_bounds: (f64, f64)) -> Membership {
        Membership {
            voltage: self.v[i] >= v_bounds.0 && self.v[i] <= v_bounds.1,
            current: self.i_tilde[i].abs() <= params.half_range(),
            integrator: self.sigma[i].abs() <= std::f64::consts::FRAC_PI_2,
        }
    }
}

/// Outcome of the time-scale separation check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimescaleReport {
    /// min over nodes of {L/(r+k_P), 4·C·P_L/I_max², (r+k_P)/k_I} (s).
    pub node_min: f64,
    /// max over edges of L_e/r_e (s).
    pub line_max: f64,
    /// node_min / line_max (+∞ when every line is resistive).
    pub ratio: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Compares the slowest line time constant with the fastest node time
/// constant; the separation holds when their ratio reaches `threshold`.
pub fn validate_timescale(
    params: &[ConverterParams],
    topology: &NetworkTopology,
    loads: &[LoadModel],
    threshold: f64,
) -> TimescaleReport {
    let mut node_min = f64::INFINITY;
    for (p, load) in params.iter().zip(loads.iter()) {
        let a = p.inductance / (p.resistance + p.k_p);
        let b = 4.0 * p.capacitance * load.nominal.power / (p.i_max * p.i_max);
        let c = (p.resistance + p.k_p) / p.k_i;
        node_min = node_min.min(a).min(b).min(c);
    }
    let line_max = topology
        .edges()
        .iter()
        .map(|e| e.inductance / e.resistance)
        .fold(0.0_f64, f64::max);
    let ratio = if line_max == 0.0 { f64::INFINITY } else { node_min / line_max };
    TimescaleReport { node_min, line_max, ratio, threshold, pass: ratio >= threshold }
}
