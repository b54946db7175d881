//! C ABI for the wentzell solver.
//!
//! Every function returns a [`WwStatus`]; on failure the message is
//! available from [`ww_last_error_message`] on the same thread. Solvers are
//! opaque handles created by [`ww_solver_new`] and released by
//! [`ww_solver_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use wentzell::cli::{run_cli, Cli, ModeArg};
use wentzell::config::load_config_str;
use wentzell::{step_midpoint, Error, SourceSpec, StateVector, System};

/// Status codes. Values 1 to 3 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WwStatus {
    Ok = 0,
    ConfigError = 1,
    HypothesisViolation = 2,
    NumericalFailure = 3,
    NullPointer = 10,
    InvalidArgument = 11,
    Panic = 12,
}

/// Opaque solver: a linear system, its source and the current state.
pub struct WwSolver {
    sys: System,
    source: SourceSpec,
    x: StateVector<f64>,
    t: f64,
    dt: f64,
    steps_taken: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    // Interior NULs would truncate the C string; replace them.
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> WwStatus {
    match e.exit_code() {
        1 => WwStatus::ConfigError,
        2 => WwStatus::HypothesisViolation,
        _ => WwStatus::NumericalFailure,
    }
}

/// Runs `f`, recording errors and converting panics into `WwStatus::Panic`.
fn guard(f: impl FnOnce() -> Result<(), (WwStatus, String)>) -> WwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            WwStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            WwStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (WwStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (WwStatus, String) {
    (WwStatus::NullPointer, format!("{name} is null"))
}

fn invalid(msg: impl Into<String>) -> (WwStatus, String) {
    (WwStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (WwStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

/// # Safety
/// `p` must be null or point to a live solver not aliased mutably elsewhere.
unsafe fn solver_ref<'a>(p: *const WwSolver) -> Result<&'a WwSolver, (WwStatus, String)> {
    p.as_ref().ok_or_else(|| null("solver"))
}

/// # Safety
/// As [`solver_ref`], with exclusive access.
unsafe fn solver_mut<'a>(p: *mut WwSolver) -> Result<&'a mut WwSolver, (WwStatus, String)> {
    p.as_mut().ok_or_else(|| null("solver"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ww_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ww_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a solver from TOML configuration text. The nonlinearity block is
/// ignored: the handle steps the linear problem with its source.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ww_solver_new(config_toml: *const c_char, allow_unchecked: bool, out: *mut *mut WwSolver) -> WwStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let src = str_arg(config_toml, "config_toml")?;
        let loaded = load_config_str(src, allow_unchecked).map_err(lib_err)?;
        let cfg = &loaded.config;
        let sys = cfg.system().map_err(lib_err)?;
        let x = cfg.initial_state(sys.mesh(), cfg.solver.seed).map_err(lib_err)?;
        let source = cfg.source_spec().map_err(lib_err)?;
        let solver = WwSolver { sys, source, x, t: 0.0, dt: cfg.solver.dt, steps_taken: 0 };
        *out = Box::into_raw(Box::new(solver));
        Ok(())
    })
}

/// Releases a solver. Null is accepted and ignored.
///
/// # Safety
/// `solver` must be null or a handle from [`ww_solver_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ww_solver_free(solver: *mut WwSolver) {
    if !solver.is_null() {
        drop(Box::from_raw(solver));
    }
}

/// Number of nodal degrees of freedom (length of each of `u` and `w`).
///
/// # Safety
/// `solver` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ww_solver_dofs(solver: *const WwSolver, out: *mut usize) -> WwStatus {
    guard(|| {
        let s = solver_ref(solver)?;
        *out.as_mut().ok_or_else(|| null("out"))? = s.x.u.len();
        Ok(())
    })
}

/// Current time of the solver.
///
/// # Safety
/// `solver` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ww_solver_time(solver: *const WwSolver, out: *mut f64) -> WwStatus {
    guard(|| {
        let s = solver_ref(solver)?;
        *out.as_mut().ok_or_else(|| null("out"))? = s.t;
        Ok(())
    })
}

/// Advances `n_steps` implicit midpoint steps of the configured size. Fails
/// without changing the state if the steps would pass the horizon.
///
/// # Safety
/// `solver` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ww_solver_step(solver: *mut WwSolver, n_steps: usize) -> WwStatus {
    guard(|| {
        let s = solver_mut(solver)?;
        let t_end = s.dt * (s.steps_taken + n_steps) as f64;
        if t_end > s.sys.horizon() * (1.0 + 1e-12) {
            return Err(invalid(format!("{n_steps} steps would reach t = {t_end}, past the horizon {}", s.sys.horizon())));
        }
        let mut x = s.x.clone();
        for k in s.steps_taken..s.steps_taken + n_steps {
            x = step_midpoint(&s.sys, &x, k as f64 * s.dt, s.dt, &s.source, k).map_err(lib_err)?.state;
        }
        s.x = x;
        s.steps_taken += n_steps;
        s.t = s.dt * s.steps_taken as f64;
        Ok(())
    })
}

/// Copies the state into caller buffers of length `len` (the dof count).
///
/// # Safety
/// `u` and `w` must each be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ww_solver_get_state(solver: *const WwSolver, u: *mut f64, w: *mut f64, len: usize) -> WwStatus {
    guard(|| {
        let s = solver_ref(solver)?;
        if u.is_null() || w.is_null() {
            return Err(null("u or w"));
        }
        if len != s.x.u.len() {
            return Err(invalid(format!("buffer length {len}, expected {}", s.x.u.len())));
        }
        std::slice::from_raw_parts_mut(u, len).copy_from_slice(&s.x.u);
        std::slice::from_raw_parts_mut(w, len).copy_from_slice(&s.x.w);
        Ok(())
    })
}

/// Replaces the state at the current time.
///
/// # Safety
/// `u` and `w` must each be valid for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn ww_solver_set_state(solver: *mut WwSolver, u: *const f64, w: *const f64, len: usize) -> WwStatus {
    guard(|| {
        let s = solver_mut(solver)?;
        if u.is_null() || w.is_null() {
            return Err(null("u or w"));
        }
        if len != s.x.u.len() {
            return Err(invalid(format!("buffer length {len}, expected {}", s.x.u.len())));
        }
        let x = StateVector::new(std::slice::from_raw_parts(u, len).to_vec(), std::slice::from_raw_parts(w, len).to_vec())
            .map_err(lib_err)?;
        if !x.is_finite() {
            return Err(invalid("state is not finite"));
        }
        s.x = x;
        Ok(())
    })
}

/// Energy of the current state under the operator at the current time.
///
/// # Safety
/// `solver` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ww_solver_energy(solver: *const WwSolver, out: *mut f64) -> WwStatus {
    guard(|| {
        let s = solver_ref(solver)?;
        let op = s.sys.operator(s.t).map_err(lib_err)?;
        *out.as_mut().ok_or_else(|| null("out"))? = wentzell::diagnostics::energy(&op, &s.x).map_err(lib_err)?;
        Ok(())
    })
}

/// Control norm of the current state at the current time.
///
/// # Safety
/// `solver` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ww_solver_control_norm(solver: *const WwSolver, out: *mut f64) -> WwStatus {
    guard(|| {
        let s = solver_ref(solver)?;
        let op = s.sys.operator(s.t).map_err(lib_err)?;
        *out.as_mut().ok_or_else(|| null("out"))? = op.control_norm(&s.x).map_err(lib_err)?;
        Ok(())
    })
}

/// Runs a command-line mode. `out_dir` may be null for the default
/// directory and `seed < 0` keeps the configured seed. On success
/// `exit_code` receives the process exit code the command line would return
/// (0 to 4).
///
/// # Safety
/// String arguments must be NUL-terminated; `exit_code` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ww_run(
    mode: *const c_char,
    config_path: *const c_char,
    out_dir: *const c_char,
    seed: i64,
    allow_unchecked: bool,
    exit_code: *mut c_int,
) -> WwStatus {
    guard(|| {
        let code = exit_code.as_mut().ok_or_else(|| null("exit_code"))?;
        let name = str_arg(mode, "mode")?;
        let mode = ModeArg::parse(name).ok_or_else(|| invalid(format!("unknown mode '{name}'")))?;
        let out = if out_dir.is_null() { None } else { Some(PathBuf::from(str_arg(out_dir, "out_dir")?)) };
        let cli = Cli {
            mode,
            config: PathBuf::from(str_arg(config_path, "config_path")?),
            out,
            jobs: None,
            seed: u64::try_from(seed).ok(),
            allow_unchecked,
        };
        match run_cli(&cli) {
            Ok(summary) => {
                *code = summary.exit_code;
                Ok(())
            }
            Err(e) => {
                *code = e.exit_code();
                Err(lib_err(e))
            }
        }
    })
}
