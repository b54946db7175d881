use std::ffi::{c_int, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use wentzell_ffi::*;

const FLAT_CYLINDER: &str = r#"
[geometry]
kind = "cylinder"
n_x = 6

[metric]
family = "flat"
horizon = 1.0

[masses]
m = -1.0
m_b = -1.0

[initial]
u = "cos(pi*x)*(1 + 0.5*cos(theta))"
w = "x*(1 - x)"

[solver]
dt = 0.01
"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ww_last_error_message()) }.to_string_lossy().into_owned()
}

fn new_solver(src: &str) -> (WwStatus, *mut WwSolver) {
    let c = CString::new(src).unwrap();
    let mut h = ptr::null_mut();
    let st = unsafe { ww_solver_new(c.as_ptr(), false, &mut h) };
    (st, h)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(ww_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn stepping_conserves_energy_on_a_static_metric() {
    let (st, h) = new_solver(FLAT_CYLINDER);
    assert_eq!(st, WwStatus::Ok, "{}", last_error());
    let mut n = 0usize;
    let (mut e0, mut e1, mut t) = (0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(ww_solver_dofs(h, &mut n), WwStatus::Ok);
        assert_eq!(ww_solver_energy(h, &mut e0), WwStatus::Ok);
        assert_eq!(ww_solver_step(h, 50), WwStatus::Ok, "{}", last_error());
        assert_eq!(ww_solver_step(h, 50), WwStatus::Ok);
        assert_eq!(ww_solver_energy(h, &mut e1), WwStatus::Ok);
        assert_eq!(ww_solver_time(h, &mut t), WwStatus::Ok);
        ww_solver_free(h);
    }
    assert_eq!(n, (6 + 1) * 6);
    assert!((t - 1.0).abs() < 1e-12);
    assert!(e0 > 0.0 && ((e1 - e0) / e0).abs() < 1e-12, "{e0} -> {e1}");
}

#[test]
fn state_round_trips_and_length_is_checked() {
    let (_, h) = new_solver(FLAT_CYLINDER);
    let mut n = 0usize;
    unsafe { ww_solver_dofs(h, &mut n) };
    let u: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let w: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
    let (mut u2, mut w2) = (vec![0.0; n], vec![0.0; n]);
    let mut norm = 0.0;
    unsafe {
        assert_eq!(ww_solver_set_state(h, u.as_ptr(), w.as_ptr(), n), WwStatus::Ok);
        assert_eq!(ww_solver_get_state(h, u2.as_mut_ptr(), w2.as_mut_ptr(), n), WwStatus::Ok);
        assert_eq!(ww_solver_get_state(h, u2.as_mut_ptr(), w2.as_mut_ptr(), n - 1), WwStatus::InvalidArgument);
        assert!(last_error().contains("expected"));
        assert_eq!(ww_solver_control_norm(h, &mut norm), WwStatus::Ok);
        ww_solver_free(h);
    }
    assert_eq!((u, w), (u2, w2));
    assert!(norm > 0.0);
}

#[test]
fn stepping_past_the_horizon_is_rejected_without_side_effects() {
    let (_, h) = new_solver(FLAT_CYLINDER);
    let mut t = -1.0;
    unsafe {
        assert_eq!(ww_solver_step(h, 101), WwStatus::InvalidArgument);
        assert!(last_error().contains("horizon"));
        ww_solver_time(h, &mut t);
        ww_solver_free(h);
    }
    assert_eq!(t, 0.0);
}

#[test]
fn errors_map_to_status_codes() {
    let (st, h) = new_solver("[geometry]\nkind = \"disk\"\n");
    assert_eq!(st, WwStatus::ConfigError);
    assert!(h.is_null());
    assert!(last_error().contains("line"), "{}", last_error());

    let (st, h) = new_solver(&FLAT_CYLINDER.replace("m = -1.0", "m = 1.0"));
    assert_eq!(st, WwStatus::HypothesisViolation);
    assert!(h.is_null());

    unsafe {
        assert_eq!(ww_solver_new(ptr::null(), false, &mut ptr::null_mut()), WwStatus::NullPointer);
        assert_eq!(ww_solver_step(ptr::null_mut(), 1), WwStatus::NullPointer);
        ww_solver_free(ptr::null_mut());
    }
    let (st, h) = new_solver(FLAT_CYLINDER);
    assert_eq!(st, WwStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe { ww_solver_free(h) };
}

#[test]
fn run_verify_mode_on_a_shipped_config() {
    let dir = tempfile::tempdir().unwrap();
    let mode = CString::new("verify").unwrap();
    let cfg = CString::new(workspace_root().join("configs/verify-interval.toml").to_str().unwrap()).unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut code: c_int = -1;
    let st = unsafe { ww_run(mode.as_ptr(), cfg.as_ptr(), out.as_ptr(), -1, false, &mut code) };
    assert_eq!(st, WwStatus::Ok, "{}", last_error());
    assert_eq!(code, 0);
    assert!(dir.path().join("checks.csv").exists());
    assert!(dir.path().join("manifest.toml").exists());

    let bad = CString::new("sideways").unwrap();
    let st = unsafe { ww_run(bad.as_ptr(), cfg.as_ptr(), out.as_ptr(), -1, false, &mut code) };
    assert_eq!(st, WwStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/wentzell.h")).unwrap();
    for f in [
        "ww_version",
        "ww_last_error_message",
        "ww_solver_new",
        "ww_solver_free",
        "ww_solver_dofs",
        "ww_solver_time",
        "ww_solver_step",
        "ww_solver_get_state",
        "ww_solver_set_state",
        "ww_solver_energy",
        "ww_solver_control_norm",
        "ww_run",
    ] {
        assert!(header.contains(&format!("{f}(")), "missing {f}");
    }
    assert!(header.contains("typedef struct WwSolver WwSolver;"));
}

/// Compiles and runs a C client against the header and static library when a
/// C compiler is available.
#[test]
fn c_client_links_and_runs() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libwentzell_ffi.a");
    if !lib.exists() {
        eprintln!("static library not built at {}; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(
        &src,
        format!(
            r#"#include <stdio.h>
#include "wentzell.h"
int main(void) {{
    const char *cfg = "{}";
    WwSolver *s = NULL;
    if (ww_solver_new(cfg, false, &s) != WW_STATUS_OK) {{ fprintf(stderr, "%s\n", ww_last_error_message()); return 1; }}
    double e0 = 0.0, e1 = 0.0;
    ww_solver_energy(s, &e0);
    if (ww_solver_step(s, 20) != WW_STATUS_OK) return 2;
    ww_solver_energy(s, &e1);
    ww_solver_free(s);
    printf("%.17g %.17g\n", e0, e1);
    return (e0 > 0.0 && (e1 - e0) / e0 < 1e-12 && (e0 - e1) / e0 < 1e-12) ? 0 : 3;
}}
"#,
            FLAT_CYLINDER.escape_default()
        ),
    )
    .unwrap();
    let bin = dir.path().join("client");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C client failed to compile");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C client exited {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr));
}
