//! `dcmesh` command-line front end.
//!
//! Exit codes: 0 success, 1 a monitor or suite failed, 2 malformed input,
//! 3 the simulation or analysis aborted.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcmesh::analysis::{eta_bound, network_equilibrium, pencil_eigs};
use dcmesh::network::validate_timescale;
use dcmesh::report::{run_directory, write_run};
use dcmesh::scenario::{reference, ScenarioFile};
use dcmesh::sim::{run_with, LineDynamics};
use dcmesh::verify::run_suite;
use dcmesh::Error;

#[derive(Parser)]
#[command(name = "dcmesh", version, about = "Meshed DC buck-converter network controller")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write traces, figure data and a report.
    Run {
        /// Scenario TOML; the bundled reference scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// `algebraic` or `dynamic`; resistive edges get L_e from a 100:1
        /// time-scale separation when switched to dynamic.
        #[arg(long)]
        line_dynamics: Option<LineDynamics>,
        /// Record every n-th integration step.
        #[arg(long, default_value_t = 10)]
        decimation: usize,
    },
    /// Print the pencil spectrum, attractivity bound, time-scale check and
    /// equilibria of a scenario.
    Analyze {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Bound on ‖u − d‖₂ (A); defaults to ‖I_max‖₂/2.
        #[arg(long)]
        b_u: Option<f64>,
    },
    /// Run a randomised verification suite.
    Verify {
        /// One of the suite names or `all`.
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse(_) | Error::Config(_) | Error::Parameter(_) => 2,
        _ => 3,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn load(path: &Option<PathBuf>) -> Result<ScenarioFile, Error> {
    match path {
        None => reference(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            ScenarioFile::parse(&text)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, out, seed, line_dynamics, decimation } => {
            let result = (|| {
                let mut file = load(&scenario)?;
                if let Some(s) = seed {
                    file.seed = s;
                }
                match line_dynamics {
                    Some(LineDynamics::Dynamic) => file = file.with_dynamic_lines(100.0)?,
                    Some(LineDynamics::Algebraic) => file.network.line_dynamics = LineDynamics::Algebraic,
                    None => {}
                }
                let built = file.build()?;
                let hash = file.hash()?;
                Ok::<_, Error>((built, hash))
            })();
            let (built, hash) = match result {
                Ok(x) => x,
                Err(e) => return fail(e),
            };
            let output = match run_with(&built, decimation) {
                Ok(o) => o,
                Err(e) => return fail(e),
            };
            let dir = run_directory(&out, &hash, built.seed);
            let report = match write_run(&dir, &built, &hash, &output) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            for m in &report.monitors {
                println!("{:<22} {}  worst {:.6e}  limit {:.6e}", m.name, if m.pass { "PASS" } else { "FAIL" }, m.worst, m.limit);
            }
            println!("output  {}", dir.display());
            println!("wall clock  {:.2} s", report.wall_clock_s);
            if let Some(e) = &output.failure {
                eprintln!("error: {e}");
                return ExitCode::from(3);
            }
            if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Command::Analyze { scenario, b_u } => {
            let result = (|| {
                let s = load(&scenario)?.build()?;
                let c: Vec<f64> = s.params.iter().map(|p| p.capacitance).collect();
                let l = s.topology.laplacian()?;
                let spec = pencil_eigs(&c, &l)?;
                println!("pencil eigenvalues [1/s]:");
                for (i, x) in spec.eigenvalues.iter().enumerate() {
                    println!("  λ{i} = {x:.6e}");
                }
                println!("kernel dimension  {}", spec.kernel_dimension());
                println!("deviation norm    {:.6e}", spec.deviation_norm());
                let b_u = b_u.unwrap_or_else(|| 0.5 * s.params.iter().map(|p| p.i_max * p.i_max).sum::<f64>().sqrt());
                println!("B_u  {b_u:.6} A   eta  {:.6e} V", eta_bound(&spec, b_u)?);

                let ts = validate_timescale(&s.params, &s.topology, &s.loads, 10.0);
                println!(
                    "time scales: node min {:.6e} s, line max {:.6e} s, ratio {:.3e}, threshold {}: {}",
                    ts.node_min,
                    ts.line_max,
                    ts.ratio,
                    ts.threshold,
                    if ts.pass { "PASS" } else { "FAIL" }
                );

                let inj: Vec<f64> =
                    s.loads.iter().map(|ld| ld.load_current(s.v_star, true)).collect::<Result<_, _>>()?;
                let eq = network_equilibrium(&s.topology, &s.loads, &inj, s.v_star, s.v_bounds)?;
                println!("equilibria (injections = nominal load currents at v*):");
                for (k, r) in eq.roots.iter().enumerate() {
                    let v: Vec<String> = r.v_eq.iter().map(|x| format!("{x:.4}")).collect();
                    println!(
                        "  #{k} v = [{}] residual {:.2e} in_bounds {} kernel {}",
                        v.join(", "),
                        r.residual,
                        r.in_bounds,
                        r.kernel
                    );
                }
                Ok::<_, Error>(())
            })();
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Command::Verify { suite, seed } => {
            let reports = match run_suite(&suite, seed) {
                Ok(r) => r,
                Err(Error::Config(msg)) => {
                    eprintln!("error: {msg}");
                    return ExitCode::from(2);
                }
                Err(e) => return fail(e),
            };
            let mut pass = true;
            for r in &reports {
                println!("{:<20} {}  {} checks  {}", r.name, if r.pass { "PASS" } else { "FAIL" }, r.checks, r.summary);
                for f in r.failures.iter().take(10) {
                    println!("    {f}");
                }
                pass &= r.pass;
            }
            if pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
