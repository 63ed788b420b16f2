//! Run reports, trace CSVs and figure-data files.
//!
//! Figure files hold the plotted quantities only; rendering is left to
//! external tools. Column headers carry units in square brackets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{eta_bound, pencil_eigs, ramp_experiment, RampTrace};
use crate::error::Result;
use crate::mpc::SampleRecord;
use crate::network::{Edge, NetworkTopology};
use crate::sim::{MonitorResult, RunOutput, RunStats, Scenario, Trace};

/// Structured summary written as `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub line_dynamics: String,
    pub horizon_steps: usize,
    pub sample_time: f64,
    pub horizon: f64,
    pub integration_step: f64,
    pub kappa: Vec<f64>,
    pub monitors: Vec<MonitorResult>,
    pub stats: RunStats,
    pub pass: bool,
    pub failure: Option<String>,
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn new(scenario: &Scenario, hash: &str, out: &RunOutput) -> Self {
        let delta = scenario.ocp.sample_time;
        RunReport {
            scenario: scenario.name.clone(),
            scenario_hash: hash.to_string(),
            seed: scenario.seed,
            line_dynamics: format!("{:?}", scenario.line_dynamics).to_lowercase(),
            horizon_steps: scenario.ocp.horizon_steps,
            sample_time: delta,
            horizon: scenario.ocp.horizon(),
            integration_step: delta / out.substeps as f64,
            kappa: out.kappa.clone(),
            monitors: out.monitors.clone(),
            stats: out.stats,
            pass: out.all_pass(),
            failure: out.failure.as_ref().map(|e| e.to_string()),
            wall_clock_s: out.wall_clock,
        }
    }
}

/// Output directory `<out>/<first 12 hash characters>_s<seed>`.
pub fn run_directory(out: &Path, hash: &str, seed: u64) -> PathBuf {
    out.join(format!("{}_s{seed}", &hash[..hash.len().min(12)]))
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn per_node(prefix: &str, unit: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i} [{unit}]")).collect()
}

/// Full trace with every channel.
pub fn write_trace(path: &Path, trace: &Trace, n: usize) -> Result<()> {
    let mut header = vec!["t [s]".to_string()];
    header.extend(per_node("v", "V", n));
    header.extend(per_node("i_tilde", "A", n));
    header.extend(per_node("sigma", "rad", n));
    header.extend(per_node("i_ref", "A", n));
    header.extend(per_node("p_load", "W", n));
    header.extend(per_node("p_provided", "W", n));
    header.push("line_losses [W]".into());
    header.push("kernel_distance [V]".into());
    header.extend(per_node("value", "-", n));
    header.push("eq_gap [V]".into());
    header.push("eq_offset [V]".into());
    header.extend(per_node("current_deviation", "A", n));
    write_rows(
        path,
        &header,
        trace.rows.iter().map(|r| {
            let mut row = vec![r.t];
            row.extend(&r.v);
            row.extend(&r.i_tilde);
            row.extend(&r.sigma);
            row.extend(&r.i_ref);
            row.extend(&r.p_load);
            row.extend(&r.p_provided);
            row.push(r.line_losses);
            row.push(r.kernel_distance);
            row.extend(&r.value);
            row.push(r.eq_gap);
            row.push(r.eq_offset);
            row.extend(&r.current_deviation);
            row
        }),
    )
}

/// Per-sample controller log.
pub fn write_mpc_log(path: &Path, log: &[SampleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "node", "k", "w [A]", "dw [A]", "u0 [A]", "value [-]", "status", "flags", "u_ss [A]", "v_ss [V]", "decrease_margin [-]",
    ])?;
    for r in log {
        w.write_record([
            r.node.to_string(),
            r.k.to_string(),
            r.w.to_string(),
            r.dw.to_string(),
            r.u0.to_string(),
            r.value.to_string(),
            r.status.clone(),
            r.flags(),
            r.u_ss.to_string(),
            r.v_ss.to_string(),
            r.decrease_margin.map_or(String::new(), |m| m.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Two-node ramp: C = 1 mF per node, 10 S line, d = (4, 10) A,
/// u = (10, 5) A, started off the kernel.
pub fn reference_ramp() -> Result<(RampTrace, f64)> {
    let topo = NetworkTopology::new(2, vec![Edge { from: 0, to: 1, resistance: 0.1, inductance: 0.0 }])?;
    let l = topo.laplacian()?;
    let c = [1e-3, 1e-3];
    let d = [4.0, 10.0];
    let u = [10.0, 5.0];
    let tr = ramp_experiment(&c, &l, &d, &u, &[550.0, 570.0], 0.05, 1e-6, 50)?;
    let b_u = (u[0] - d[0]).hypot(u[1] - d[1]);
    let eta = eta_bound(&pencil_eigs(&c, &l)?, b_u)?;
    Ok((tr, eta))
}

/// Writes fig3_ramp.csv … fig9_kernel.csv.
pub fn write_figures(dir: &Path, scenario: &Scenario, trace: &Trace) -> Result<Vec<PathBuf>> {
    let n = scenario.node_count();
    let mut files = Vec::new();
    let mut file = |name: &str| {
        let p = dir.join(name);
        files.push(p.clone());
        p
    };

    let (ramp, eta) = reference_ramp()?;
    write_rows(
        &file("fig3_ramp.csv"),
        &["t [s]", "v0 [V]", "v1 [V]", "mean [V]", "kernel_distance [V]", "eta [V]"].map(String::from),
        (0..ramp.t.len()).map(|k| vec![ramp.t[k], ramp.v[k][0], ramp.v[k][1], ramp.mean[k], ramp.kernel_distance[k], eta]),
    )?;

    let t_col = || vec!["t [s]".to_string()];
    let mut h = t_col();
    h.extend(per_node("v", "V", n));
    write_rows(&file("fig4_voltages.csv"), &h, trace.rows.iter().map(|r| [vec![r.t], r.v.clone()].concat()))?;

    let mut h = t_col();
    h.extend(per_node("i", "A", n));
    let i_s: Vec<f64> = scenario.params.iter().map(|p| p.i_s()).collect();
    write_rows(
        &file("fig5_currents.csv"),
        &h,
        trace.rows.iter().map(|r| [vec![r.t], r.i_tilde.iter().zip(&i_s).map(|(a, b)| a + b).collect()].concat()),
    )?;

    let mut h = t_col();
    h.extend(per_node("p_load", "W", n));
    h.extend(per_node("p_provided", "W", n));
    h.extend(["total_load [W]", "total_provided [W]", "line_losses [W]"].map(String::from));
    write_rows(
        &file("fig6_power.csv"),
        &h,
        trace.rows.iter().map(|r| {
            let mut row = vec![r.t];
            row.extend(&r.p_load);
            row.extend(&r.p_provided);
            row.push(r.p_load.iter().sum());
            row.push(r.p_provided.iter().sum());
            row.push(r.line_losses);
            row
        }),
    )?;

    let mut h = t_col();
    h.extend(per_node("current_deviation", "A", n));
    write_rows(
        &file("fig7_current_deviation.csv"),
        &h,
        trace.rows.iter().map(|r| [vec![r.t], r.current_deviation.clone()].concat()),
    )?;

    write_rows(
        &file("fig8_equilibrium.csv"),
        &["t [s]", "eq_offset [V]", "eq_gap [V]"].map(String::from),
        trace.rows.iter().map(|r| vec![r.t, r.eq_offset, r.eq_gap]),
    )?;

    write_rows(
        &file("fig9_kernel.csv"),
        &["t [s]", "kernel_distance [V]"].map(String::from),
        trace.rows.iter().map(|r| vec![r.t, r.kernel_distance]),
    )?;
    Ok(files)
}

/// Writes the trace, controller log, figure data and report into `dir`.
pub fn write_run(dir: &Path, scenario: &Scenario, hash: &str, out: &RunOutput) -> Result<RunReport> {
    fs::create_dir_all(dir)?;
    write_trace(&dir.join("trace.csv"), &out.trace, scenario.node_count())?;
    write_mpc_log(&dir.join("mpc_log.csv"), &out.mpc_log)?;
    write_figures(dir, scenario, &out.trace)?;
    let report = RunReport::new(scenario, hash, out);
    let json = serde_json::to_string_pretty(&report).map_err(|e| crate::Error::Io(e.to_string()))?;
    fs::write(dir.join("report.json"), json)?;
    Ok(report)
}
