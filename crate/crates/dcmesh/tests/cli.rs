//! End-to-end tests of the `dcmesh` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dcmesh::scenario::REFERENCE_SCENARIO;

fn dcmesh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcmesh")).args(args).output().expect("binary runs")
}

fn short_reference(total_time: f64) -> String {
    let mut f = dcmesh::scenario::reference().unwrap();
    f.total_time = total_time;
    f.steps.retain(|s| s.time < total_time);
    f.to_toml().unwrap()
}

fn only_dir(root: &Path) -> std::path::PathBuf {
    let mut dirs: Vec<_> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

#[test]
fn negative_line_resistance_exits_2_and_names_edge() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    let text = REFERENCE_SCENARIO.replacen("resistance = 0.5", "resistance = -0.5", 1);
    assert_ne!(text, REFERENCE_SCENARIO);
    fs::write(&path, text).unwrap();
    let out = dcmesh(&["run", "--scenario", path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("edge 0"), "{err}");
}

#[test]
fn unparsable_scenario_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "name = [").unwrap();
    let out = dcmesh(&["run", "--scenario", path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("short.toml");
    fs::write(&path, short_reference(0.35)).unwrap();
    let mut traces = Vec::new();
    for k in 0..2 {
        let out_dir = tmp.path().join(format!("run{k}"));
        let out = dcmesh(&["run", "--scenario", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--seed", "7"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let dir = only_dir(&out_dir);
        assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("_s7"));
        traces.push((fs::read(dir.join("trace.csv")).unwrap(), fs::read(dir.join("mpc_log.csv")).unwrap()));
    }
    assert!(traces[0] == traces[1], "traces differ between identical runs");
}

#[test]
fn unknown_suite_exits_2() {
    let out = dcmesh(&["verify", "--suite", "no-such-suite"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_suite_passes() {
    let out = dcmesh(&["verify", "--suite", "kkt", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn analyze_prints_spectrum_and_equilibrium() {
    let out = dcmesh(&["analyze", "--b-u", "7.81"]);
    assert_eq!(out.status.code(), Some(0));
    let s = String::from_utf8_lossy(&out.stdout);
    for key in ["pencil eigenvalues", "kernel dimension  1", "eta", "time scales", "in_bounds true"] {
        assert!(s.contains(key), "missing {key:?} in\n{s}");
    }
}

#[test]
fn bundled_run_writes_figures() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dcmesh(&["run", "--out", tmp.path().to_str().unwrap(), "--decimation", "50"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let dir = only_dir(tmp.path());
    for f in [
        "fig3_ramp.csv",
        "fig4_voltages.csv",
        "fig5_currents.csv",
        "fig6_power.csv",
        "fig7_current_deviation.csv",
        "fig8_equilibrium.csv",
        "fig9_kernel.csv",
        "trace.csv",
        "mpc_log.csv",
        "report.json",
    ] {
        let p = dir.join(f);
        assert!(p.exists() && fs::metadata(&p).unwrap().len() > 0, "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(true));
}

fn two_node(edges: &str, nodes: usize) -> String {
    let node = "[[node]]\ni_max = 100.0\nload = { power = 0.0 }\n\n".repeat(nodes);
    format!(
        r#"name = "small"
v_star = 560.0
v_bounds = [240.0, 800.0]
total_time = 0.1

[network]
nodes = {nodes}
edges = [{edges}]

[converter]
inductance = 1.8e-3
resistance = 0.2
capacitance = 1.0
v_in = 800.0
k_p = 2.0
k_i = 500.0
v_min_load = 40.0

{node}"#
    )
}

#[test]
fn analyze_two_node_spectrum() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("two.toml");
    fs::write(&path, two_node("{ from = 0, to = 1, resistance = 0.1 }", 2)).unwrap();
    let out = dcmesh(&["analyze", "--scenario", path.to_str().unwrap(), "--b-u", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = String::from_utf8_lossy(&out.stdout);
    // Unit capacitances and a 10 S line: λ = {0, 2·10}.
    let lambdas: Vec<f64> = s
        .lines()
        .filter_map(|l| l.trim().strip_prefix('λ'))
        .map(|l| l.split('=').nth(1).unwrap().trim().parse().unwrap())
        .collect();
    assert_eq!(lambdas.len(), 2, "{s}");
    assert!(lambdas[0].abs() < 1e-9 && (lambdas[1] - 20.0).abs() < 1e-9, "{lambdas:?}");
}

#[test]
fn analyze_disconnected_names_components() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("split.toml");
    let edges = "{ from = 0, to = 1, resistance = 0.1 }, { from = 2, to = 3, resistance = 0.1 }";
    fs::write(&path, two_node(edges, 4)).unwrap();
    let out = dcmesh(&["analyze", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[0, 1]") && err.contains("[2, 3]"), "{err}");
}
