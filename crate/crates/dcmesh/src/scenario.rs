//! Scenario files (TOML) and the bundled reference scenario.
//!
//! Converter constants shared by every node live in `[converter]`; each
//! `[[node]]` entry may override them. Unknown keys are rejected so that
//! typos surface as parse errors with line and column.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mpc::OcpSpec;
use crate::network::{validate_timescale, ConverterParams, Edge, LoadModel, NetworkTopology, Zip};
use crate::sim::{LineDynamics, LoadStep, MonitorConfig, Scenario};

/// The six-node reference network shipped with the crate.
pub const REFERENCE_SCENARIO: &str = include_str!("../scenarios/reference.toml");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    /// Voltage reference v* (V).
    pub v_star: f64,
    /// Admissible voltage band [V_min, V_max] (V).
    pub v_bounds: [f64; 2],
    pub total_time: f64,
    #[serde(default)]
    pub seed: u64,
    /// Relative load uncertainty γ_d.
    #[serde(default)]
    pub uncertainty: f64,
    /// Half-width of the seeded initial voltage spread (V).
    #[serde(default = "default_spread")]
    pub initial_spread: f64,
    pub network: NetworkSection,
    pub converter: ConverterSection,
    #[serde(rename = "node")]
    pub nodes: Vec<NodeSection>,
    #[serde(default, rename = "step")]
    pub steps: Vec<LoadStep>,
    #[serde(default)]
    pub mpc: OcpSpec,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub monitors: MonitorConfig,
}

fn default_spread() -> f64 {
    5.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub nodes: usize,
    #[serde(default = "default_lines")]
    pub line_dynamics: LineDynamics,
    pub edges: Vec<Edge>,
}

fn default_lines() -> LineDynamics {
    LineDynamics::Algebraic
}

/// Converter constants; every field may be overridden per node.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConverterSection {
    pub inductance: Option<f64>,
    pub resistance: Option<f64>,
    pub capacitance: Option<f64>,
    pub v_in: Option<f64>,
    pub i_max: Option<f64>,
    pub k_p: Option<f64>,
    pub k_i: Option<f64>,
    /// Constant-power cutoff voltage (V).
    pub v_min_load: Option<f64>,
}

impl ConverterSection {
    fn or(self, base: ConverterSection) -> ConverterSection {
        ConverterSection {
            inductance: self.inductance.or(base.inductance),
            resistance: self.resistance.or(base.resistance),
            capacitance: self.capacitance.or(base.capacitance),
            v_in: self.v_in.or(base.v_in),
            i_max: self.i_max.or(base.i_max),
            k_p: self.k_p.or(base.k_p),
            k_i: self.k_i.or(base.k_i),
            v_min_load: self.v_min_load.or(base.v_min_load),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSection {
    #[serde(flatten)]
    pub converter: ConverterSection,
    /// Initial nominal load.
    pub load: Zip,
    /// Upper corner of the admissible load box.
    #[serde(default)]
    pub upper: Option<Zip>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    /// Integration step (s); omitted = chosen from the stiffness.
    pub step_size: Option<f64>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Builds and validates the domain scenario.
    pub fn build(&self) -> Result<Scenario> {
        let topology = NetworkTopology::new(self.network.nodes, self.network.edges.clone())?;
        if self.nodes.len() != self.network.nodes {
            return Err(Error::Config(format!(
                "network declares {} nodes but {} [[node]] entries are given",
                self.network.nodes,
                self.nodes.len()
            )));
        }
        let mut params = Vec::new();
        let mut loads = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let c = node.converter.or(self.converter);
            let need = |x: Option<f64>, name: &str| {
                x.ok_or_else(|| Error::Config(format!("node {i}: missing converter field '{name}'")))
            };
            params.push(ConverterParams {
                inductance: need(c.inductance, "inductance")?,
                resistance: need(c.resistance, "resistance")?,
                capacitance: need(c.capacitance, "capacitance")?,
                v_in: need(c.v_in, "v_in")?,
                i_max: need(c.i_max, "i_max")?,
                k_p: need(c.k_p, "k_p")?,
                k_i: need(c.k_i, "k_i")?,
            });
            let radius = self.uncertainty * node.load.distance(&Zip::default());
            loads.push(LoadModel {
                actual: node.load,
                nominal: node.load,
                uncertainty: radius,
                upper: node.upper,
                v_min_load: need(c.v_min_load, "v_min_load")?,
            });
        }
        let scenario = Scenario {
            name: self.name.clone(),
            topology,
            params,
            loads,
            uncertainty: self.uncertainty,
            steps: self.steps.clone(),
            v_star: self.v_star,
            v_bounds: (self.v_bounds[0], self.v_bounds[1]),
            ocp: self.mpc,
            step_size: self.simulation.step_size,
            total_time: self.total_time,
            line_dynamics: self.network.line_dynamics,
            seed: self.seed,
            initial_spread: self.initial_spread,
            monitors: self.monitors,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Switches to dynamic lines. Edges without inductance get
    /// L_e = r_e·τ_node/ratio, where τ_node is the fastest node time
    /// constant, so the line/node time-scale ratio equals `ratio` (rounded
    /// so that it never falls below it).
    pub fn with_dynamic_lines(&self, ratio: f64) -> Result<ScenarioFile> {
        let built = self.build()?;
        let report = validate_timescale(&built.params, &built.topology, &built.loads, ratio);
        let mut f = self.clone();
        f.network.line_dynamics = LineDynamics::Dynamic;
        for e in f.network.edges.iter_mut() {
            if e.inductance == 0.0 {
                e.inductance = e.resistance * report.node_min / ratio * (1.0 - 1e-12);
            }
        }
        Ok(f)
    }

    /// SHA-256 of the canonical serialisation (hex).
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}

/// Parses and builds a scenario in one step.
pub fn load_scenario(text: &str) -> Result<Scenario> {
    ScenarioFile::parse(text)?.build()
}

/// The bundled reference scenario.
pub fn reference() -> Result<ScenarioFile> {
    ScenarioFile::parse(REFERENCE_SCENARIO)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_scenario_builds() {
        let f = reference().unwrap();
        let s = f.build().unwrap();
        assert_eq!(s.node_count(), 6);
        assert_eq!(s.topology.edge_count(), 8);
        let i_max: Vec<f64> = s.params.iter().map(|p| p.i_max).collect();
        assert_eq!(i_max, vec![178.7, 160.9, 193.2, 162.1, 207.9, 173.2]);
        assert!(s.params.iter().all(|p| p.v_in == 800.0));
        assert_eq!(s.v_star, 560.0);
        assert_eq!(s.steps.len(), 4);
    }

    #[test]
    fn round_trip_keeps_hash() {
        let f = reference().unwrap();
        let g = ScenarioFile::parse(&f.to_toml().unwrap()).unwrap();
        assert_eq!(f.hash().unwrap(), g.hash().unwrap());
    }

    #[test]
    fn dynamic_lines_meet_ratio() {
        let f = reference().unwrap().with_dynamic_lines(100.0).unwrap();
        let s = f.build().unwrap();
        let r = validate_timescale(&s.params, &s.topology, &s.loads, 100.0);
        assert!((r.ratio - 100.0).abs() < 1e-9, "{r:?}");
        assert!(r.pass);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = REFERENCE_SCENARIO.replace("total_time", "totl_time");
        let err = ScenarioFile::parse(&text).unwrap_err();
        assert!(err.to_string().contains("totl_time"), "{err}");
    }

    #[test]
    fn negative_resistance_names_edge() {
        let mut f = reference().unwrap();
        f.network.edges[2].resistance = -0.5;
        let err = f.build().unwrap_err().to_string();
        assert!(err.contains("(2, 3)") || err.contains("edge 2"), "{err}");
    }
}
