//! Exercises the C ABI through its Rust declarations.

use std::ffi::{c_char, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dcmesh_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { dcmesh_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(511)].iter().map(|c| *c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn short_reference_run_round_trip() {
    unsafe {
        let mut s: *mut DcmeshScenario = ptr::null_mut();
        assert_eq!(dcmesh_scenario_reference(&mut s), DcmeshStatus::Ok);
        let mut n = 0usize;
        assert_eq!(dcmesh_scenario_node_count(s, &mut n), DcmeshStatus::Ok);
        assert_eq!(n, 6);
        assert_eq!(dcmesh_scenario_set_seed(s, 7), DcmeshStatus::Ok);
        assert_eq!(dcmesh_scenario_set_total_time(s, 0.2), DcmeshStatus::Ok);

        let mut r: *mut DcmeshRun = ptr::null_mut();
        assert_eq!(dcmesh_run(s, 20, &mut r), DcmeshStatus::Ok, "{}", last_error());
        let mut st = DcmeshStats::default();
        assert_eq!(dcmesh_run_stats(r, &mut st), DcmeshStatus::Ok);
        assert!(st.all_pass);
        // Samples at k·δ for k = 0..=T/δ.
        assert_eq!(st.samples, 41);
        assert!(st.max_current_ratio < 1.0);

        let mut rows = 0usize;
        assert_eq!(dcmesh_run_row_count(r, &mut rows), DcmeshStatus::Ok);
        assert!(rows > 1);
        let mut t = 0.0;
        let mut v = [0.0; 6];
        assert_eq!(dcmesh_run_voltages(r, rows - 1, &mut t, v.as_mut_ptr(), 6), DcmeshStatus::Ok);
        assert!((t - 0.2).abs() < 1e-9, "t = {t}");
        assert!(v.iter().all(|x| (x - 560.0).abs() < 10.0), "{v:?}");

        assert_eq!(dcmesh_run_voltages(r, rows, &mut t, v.as_mut_ptr(), 6), DcmeshStatus::OutOfRange);
        assert_eq!(dcmesh_run_voltages(r, 0, &mut t, v.as_mut_ptr(), 5), DcmeshStatus::BufferTooSmall);
        assert!(last_error().contains("need 6"));

        dcmesh_run_free(r);
        dcmesh_scenario_free(s);
    }
}

#[test]
fn errors_map_to_codes() {
    unsafe {
        let mut s: *mut DcmeshScenario = ptr::null_mut();
        let bad = CString::new("name = [").unwrap();
        assert_eq!(dcmesh_scenario_from_toml(bad.as_ptr(), &mut s), DcmeshStatus::Parse);
        assert!(s.is_null());
        assert!(!last_error().is_empty());

        let text = dcmesh::scenario::REFERENCE_SCENARIO.replacen("resistance = 0.5", "resistance = -0.5", 1);
        let text = CString::new(text).unwrap();
        assert_eq!(dcmesh_scenario_from_toml(text.as_ptr(), &mut s), DcmeshStatus::Parameter);
        assert!(last_error().contains("edge 0"), "{}", last_error());

        assert_eq!(dcmesh_scenario_from_toml(ptr::null(), &mut s), DcmeshStatus::NullPointer);
        let mut n = 0usize;
        assert_eq!(dcmesh_scenario_node_count(ptr::null(), &mut n), DcmeshStatus::NullPointer);
        dcmesh_scenario_free(ptr::null_mut());
        dcmesh_run_free(ptr::null_mut());
    }
}

#[test]
fn header_is_generated_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dcmesh.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "dcmesh_scenario_reference",
        "dcmesh_scenario_from_toml",
        "dcmesh_run",
        "dcmesh_run_stats",
        "dcmesh_run_free",
        "DCMESH_STATUS_OK",
        "typedef struct DcmeshScenario DcmeshScenario",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    // Syntax-check with the system C compiler when one is installed.
    if let Ok(out) = Command::new("cc").args(["-std=c99", "-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
