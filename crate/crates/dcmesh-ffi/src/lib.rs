//! C ABI for `dcmesh`.
//!
//! Scenarios and run results are opaque handles created and destroyed by
//! this library. Every fallible call returns a [`DcmeshStatus`]; on error a
//! message for the calling thread is available through
//! [`dcmesh_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dcmesh::scenario::{reference, ScenarioFile};
use dcmesh::sim::{run_with, RunOutput, Scenario};
use dcmesh::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcmeshStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Config = 4,
    Parameter = 5,
    Numerical = 6,
    Simulation = 7,
    OutOfRange = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Parsed, validated scenario.
pub struct DcmeshScenario {
    file: ScenarioFile,
    built: Scenario,
}

/// Result of a closed-loop run.
pub struct DcmeshRun {
    output: RunOutput,
    nodes: usize,
}

/// Summary statistics of a run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DcmeshStats {
    /// Largest |ĩ|/I_max over nodes and time.
    pub max_current_ratio: f64,
    /// Largest |v − v*| over nodes and time (V).
    pub max_voltage_deviation: f64,
    /// Largest distance of v from the consensus line (V).
    pub max_kernel_distance: f64,
    pub integration_steps: usize,
    pub samples: usize,
    /// True when every monitor passed and the run completed.
    pub all_pass: bool,
    pub wall_clock_s: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> DcmeshStatus {
    match e {
        Error::Parse(_) => DcmeshStatus::Parse,
        Error::Config(_) => DcmeshStatus::Config,
        Error::Parameter(_) | Error::Domain(_) => DcmeshStatus::Parameter,
        Error::Numerical(_) | Error::EquilibriumNotFound { .. } => DcmeshStatus::Numerical,
        _ => DcmeshStatus::Simulation,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DcmeshStatus, String)>) -> DcmeshStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcmeshStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DcmeshStatus::Panic
        }
    }
}

fn lib(e: Error) -> (DcmeshStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (DcmeshStatus, String) {
    (DcmeshStatus::NullPointer, format!("{name} is null"))
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, (DcmeshStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

fn publish(file: ScenarioFile, out: *mut *mut DcmeshScenario) -> Result<(), (DcmeshStatus, String)> {
    let built = file.build().map_err(lib)?;
    unsafe { *out = Box::into_raw(Box::new(DcmeshScenario { file, built })) };
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dcmesh_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates the bundled six-node reference scenario.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn dcmesh_scenario_reference(out: *mut *mut DcmeshScenario) -> DcmeshStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        publish(reference().map_err(lib)?, out)
    })
}

/// Parses and validates a scenario from NUL-terminated TOML text.
///
/// # Safety
/// `toml` must be a valid C string; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn dcmesh_scenario_from_toml(toml: *const c_char, out: *mut *mut DcmeshScenario) -> DcmeshStatus {
    guard(|| {
        if toml.is_null() {
            return Err(null("toml"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(toml)
            .to_str()
            .map_err(|e| (DcmeshStatus::InvalidUtf8, e.to_string()))?;
        publish(ScenarioFile::parse(text).map_err(lib)?, out)
    })
}

/// Number of nodes in the scenario.
///
/// # Safety
/// `scenario` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dcmesh_scenario_node_count(scenario: *const DcmeshScenario, out: *mut usize) -> DcmeshStatus {
    guard(|| {
        let s = deref(scenario, "scenario")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = s.built.node_count();
        Ok(())
    })
}

/// Replaces the seed of the initial-state and load draws.
///
/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dcmesh_scenario_set_seed(scenario: *mut DcmeshScenario, seed: u64) -> DcmeshStatus {
    guard(|| {
        let s = scenario.as_mut().ok_or_else(|| null("scenario"))?;
        s.file.seed = seed;
        s.built.seed = seed;
        Ok(())
    })
}

/// Shortens the simulated horizon; load steps after `total_time` are dropped.
///
/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dcmesh_scenario_set_total_time(scenario: *mut DcmeshScenario, total_time: f64) -> DcmeshStatus {
    guard(|| {
        let s = scenario.as_mut().ok_or_else(|| null("scenario"))?;
        let mut file = s.file.clone();
        file.total_time = total_time;
        file.steps.retain(|st| st.time < total_time);
        let built = file.build().map_err(lib)?;
        s.file = file;
        s.built = built;
        Ok(())
    })
}

/// Releases a scenario. Null is ignored.
///
/// # Safety
/// `scenario` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dcmesh_scenario_free(scenario: *mut DcmeshScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Simulates the scenario, recording every `decimation`-th integration step.
/// A run that aborts mid-way still yields a handle (with the partial trace)
/// and returns `DCMESH_STATUS_SIMULATION`.
///
/// # Safety
/// `scenario` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dcmesh_run(scenario: *const DcmeshScenario, decimation: usize, out: *mut *mut DcmeshRun) -> DcmeshStatus {
    guard(|| {
        let s = deref(scenario, "scenario")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let output = run_with(&s.built, decimation).map_err(lib)?;
        let failure = output.failure.clone();
        *out = Box::into_raw(Box::new(DcmeshRun { output, nodes: s.built.node_count() }));
        match failure {
            Some(e) => Err((DcmeshStatus::Simulation, e.to_string())),
            None => Ok(()),
        }
    })
}

/// Summary statistics of a run.
///
/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dcmesh_run_stats(run: *const DcmeshRun, out: *mut DcmeshStats) -> DcmeshStatus {
    guard(|| {
        let r = deref(run, "run")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let st = r.output.stats;
        *out = DcmeshStats {
            max_current_ratio: st.max_current_ratio,
            max_voltage_deviation: st.max_voltage_deviation,
            max_kernel_distance: st.max_kernel_distance,
            integration_steps: st.integration_steps,
            samples: st.samples,
            all_pass: r.output.all_pass(),
            wall_clock_s: r.output.wall_clock,
        };
        Ok(())
    })
}

/// Number of recorded trace rows.
///
/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dcmesh_run_row_count(run: *const DcmeshRun, out: *mut usize) -> DcmeshStatus {
    guard(|| {
        let r = deref(run, "run")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = r.output.trace.rows.len();
        Ok(())
    })
}

/// Copies the time and node voltages of trace row `row` into `t` and
/// `voltages` (`len` must be at least the node count).
///
/// # Safety
/// `run` must be a live handle, `t` writable and `voltages` point to `len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dcmesh_run_voltages(
    run: *const DcmeshRun,
    row: usize,
    t: *mut f64,
    voltages: *mut f64,
    len: usize,
) -> DcmeshStatus {
    guard(|| {
        let r = deref(run, "run")?;
        if t.is_null() {
            return Err(null("t"));
        }
        if voltages.is_null() {
            return Err(null("voltages"));
        }
        let rows = &r.output.trace.rows;
        let rec = rows
            .get(row)
            .ok_or_else(|| (DcmeshStatus::OutOfRange, format!("row {row} of {}", rows.len())))?;
        if len < r.nodes {
            return Err((DcmeshStatus::BufferTooSmall, format!("need {} doubles, got {len}", r.nodes)));
        }
        *t = rec.t;
        ptr::copy_nonoverlapping(rec.v.as_ptr(), voltages, r.nodes);
        Ok(())
    })
}

/// Releases a run. Null is ignored.
///
/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dcmesh_run_free(run: *mut DcmeshRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
