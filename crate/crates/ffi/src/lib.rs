// Copyright 2026 The iontrap Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! C ABI for the iontrap simulator.
//!
//! Conventions:
//!
//! * Every fallible function returns an [`IontrapStatus`]; on failure
//!   [`iontrap_last_error`] describes the problem. Results are written
//!   through out-pointers and left untouched on failure.
//! * Configurations and command results are opaque handles created by
//!   `iontrap_*_new`/`iontrap_config_*`/`iontrap_run` and released with the
//!   matching `*_free` function. Passing NULL to a `*_free` is a no-op.
//! * Angular frequencies are in rad/s and times in seconds, as in the Rust
//!   library. Configuration text uses the unit-suffixed TOML keys.
//! * Panics never cross the boundary; they are reported as
//!   `IONTRAP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use iontrap::analysis::{fit_flop, FlopOptions, Point};
use iontrap::config::ExperimentConfig;
use iontrap::experiments::{run_experiment, truth_table_experiment};
use iontrap::gates;
use iontrap::hamiltonian::{light_shift_unit, SlopeConvention};
use iontrap::report::CommandOutput;
use iontrap::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IontrapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Numerical = 5,
    Io = 6,
    /// The command ran but a fit did not converge; the result handle is
    /// still valid.
    NotConverged = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

type Failure = (IontrapStatus, String);

fn status_of(e: &Error) -> IontrapStatus {
    match e {
        Error::Config(_) | Error::Parse { .. } => IontrapStatus::Config,
        Error::Io(_) => IontrapStatus::Io,
        Error::SingularDesign(_) | Error::EquilibriumNotConverged { .. } => IontrapStatus::Numerical,
        _ => IontrapStatus::InvalidArgument,
    }
}

fn lib(e: Error) -> Failure {
    (status_of(&e), e.to_string())
}

fn guard(f: impl FnOnce() -> Result<IontrapStatus, Failure>) -> IontrapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IontrapStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller guarantees that non-null pointers are valid.
    unsafe { p.as_ref() }.ok_or((IontrapStatus::NullPointer, format!("{what} is NULL")))
}

fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller guarantees that non-null pointers are valid.
    unsafe { p.as_mut() }.ok_or((IontrapStatus::NullPointer, format!("{what} is NULL")))
}

fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((IontrapStatus::NullPointer, format!("{what} is NULL")));
    }
    // SAFETY: non-null, and the caller guarantees NUL termination.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (IontrapStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn iontrap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on the calling thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn iontrap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

// ------------------------------------------------------------- config

/// Opaque experiment configuration.
pub struct IontrapConfig {
    inner: ExperimentConfig,
}

fn new_config(cfg: ExperimentConfig, out: *mut *mut IontrapConfig) -> Result<IontrapStatus, Failure> {
    cfg.validate().map_err(lib)?;
    *out_ptr(out, "out")? = Box::into_raw(Box::new(IontrapConfig { inner: cfg }));
    Ok(IontrapStatus::Ok)
}

/// Parse a TOML configuration.
///
/// # Safety
/// `toml` must be NULL or a NUL-terminated string; `out` must be NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn iontrap_config_from_toml(toml: *const c_char, out: *mut *mut IontrapConfig) -> IontrapStatus {
    guard(|| {
        let text = string(toml, "toml")?;
        new_config(ExperimentConfig::from_toml_str(text).map_err(lib)?, out)
    })
}

/// Load a configuration file (TOML, or the `config` field of a JSON
/// summary).
///
/// # Safety
/// As for [`iontrap_config_from_toml`].
#[no_mangle]
pub unsafe extern "C" fn iontrap_config_load(path: *const c_char, out: *mut *mut IontrapConfig) -> IontrapStatus {
    guard(|| {
        let path = string(path, "path")?;
        new_config(ExperimentConfig::load(Path::new(path)).map_err(lib)?, out)
    })
}

/// Override the master seed.
///
/// # Safety
/// `config` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iontrap_config_set_seed(config: *mut IontrapConfig, seed: u64) -> IontrapStatus {
    guard(|| {
        out_ptr(config, "config")?.inner.run.seed = seed;
        Ok(IontrapStatus::Ok)
    })
}

/// Override the shots per point.
///
/// # Safety
/// `config` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iontrap_config_set_shots(config: *mut IontrapConfig, shots: usize) -> IontrapStatus {
    guard(|| {
        if shots == 0 {
            return Err((IontrapStatus::InvalidArgument, "shots must be > 0".into()));
        }
        out_ptr(config, "config")?.inner.run.shots = shots;
        Ok(IontrapStatus::Ok)
    })
}

/// # Safety
/// `config` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn iontrap_config_free(config: *mut IontrapConfig) {
    if !config.is_null() {
        // SAFETY: created by Box::into_raw in this crate.
        drop(unsafe { Box::from_raw(config) });
    }
}

// ------------------------------------------------------------ commands

/// Opaque result of [`iontrap_run`].
pub struct IontrapResult {
    output: CommandOutput,
    config: ExperimentConfig,
    threads: usize,
    elapsed: Duration,
    json: CString,
}

/// Run a config-driven command (`modes`, `stark-scan`, `truth-table`,
/// `rabi-flop`, `ghz`, `echo`) with `threads` workers (0 = one per core).
///
/// # Safety
/// `config` must be NULL or a live handle, `command` NULL or a
/// NUL-terminated string, `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn iontrap_run(
    config: *const IontrapConfig,
    command: *const c_char,
    threads: usize,
    out: *mut *mut IontrapResult,
) -> IontrapStatus {
    guard(|| {
        let cfg = &non_null(config, "config")?.inner;
        let command = string(command, "command")?;
        let out = out_ptr(out, "out")?;
        let start = Instant::now();
        let output = run_experiment(command, cfg, threads).map_err(lib)?;
        let elapsed = start.elapsed();
        let summary = output.summary(Some(cfg), threads, elapsed);
        let json = CString::new(summary.to_string()).map_err(|e| (IontrapStatus::Panic, e.to_string()))?;
        let ok = output.ok;
        *out = Box::into_raw(Box::new(IontrapResult {
            output,
            config: cfg.clone(),
            threads,
            elapsed,
            json,
        }));
        if ok {
            Ok(IontrapStatus::Ok)
        } else {
            set_error("fit did not converge");
            Ok(IontrapStatus::NotConverged)
        }
    })
}

/// JSON summary of a result (same schema as the command line
/// `summary.json`). Owned by the handle; NULL if `result` is NULL.
///
/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iontrap_result_json(result: *const IontrapResult) -> *const c_char {
    // SAFETY: the caller guarantees validity.
    unsafe { result.as_ref() }.map_or(std::ptr::null(), |r| r.json.as_ptr())
}

/// Write the CSV artifacts and `summary.json` into directory `dir`.
///
/// # Safety
/// `result` must be NULL or a live handle, `dir` NULL or a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn iontrap_result_write(result: *const IontrapResult, dir: *const c_char) -> IontrapStatus {
    guard(|| {
        let r = non_null(result, "result")?;
        let dir = string(dir, "dir")?;
        r.output
            .write(Path::new(dir), Some(&r.config), r.threads, r.elapsed)
            .map_err(lib)?;
        Ok(IontrapStatus::Ok)
    })
}

/// # Safety
/// `result` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn iontrap_result_free(result: *mut IontrapResult) {
    if !result.is_null() {
        // SAFETY: created by Box::into_raw in this crate.
        drop(unsafe { Box::from_raw(result) });
    }
}

// --------------------------------------------------------- closed forms

/// Conditional-phase gate time `(pi/2) / rate`; `differential` selects the
/// differential Ramsey slope `2 kappa` instead of the per-level shift.
///
/// # Safety
/// `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn iontrap_gate_time(
    eta: f64,
    rabi_0: f64,
    detuning: f64,
    differential: bool,
    out: *mut f64,
) -> IontrapStatus {
    guard(|| {
        let convention = if differential {
            SlopeConvention::Differential
        } else {
            SlopeConvention::PerLevel
        };
        let out = out_ptr(out, "out")?;
        *out = gates::gate_time(eta, rabi_0, detuning, convention).map_err(lib)?;
        Ok(IontrapStatus::Ok)
    })
}

/// Multi-ion entangling time `2 pi Delta / (eta Omega)^2`.
///
/// # Safety
/// `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn iontrap_entangle_time(
    eta_bus: f64,
    rabi_0: f64,
    detuning: f64,
    out: *mut f64,
) -> IontrapStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = gates::entangle_time(eta_bus, rabi_0, detuning).map_err(lib)?;
        Ok(IontrapStatus::Ok)
    })
}

/// Light-shift unit `kappa = eta^2 Omega0^2 / (4 Delta)`.
///
/// # Safety
/// `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn iontrap_light_shift(eta: f64, rabi_0: f64, detuning: f64, out: *mut f64) -> IontrapStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = light_shift_unit(eta, rabi_0, detuning).map_err(lib)?;
        Ok(IontrapStatus::Ok)
    })
}

// ---------------------------------------------------------- truth table

/// Row-major truth table; row = input, column = output, both in the order
/// `|S,0>, |D,0>, |S,1>, |D,1>`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IontrapTruthTable {
    pub probabilities: [f64; 16],
    pub stderr: [f64; 16],
    /// Population outside the computational subspace, per input.
    pub leakage: [f64; 4],
    pub phi_time: f64,
    pub t0: f64,
}

/// Run the truth-table experiment described by `config`.
///
/// # Safety
/// `config` must be NULL or a live handle, `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn iontrap_truth_table(
    config: *const IontrapConfig,
    threads: usize,
    out: *mut IontrapTruthTable,
) -> IontrapStatus {
    guard(|| {
        let cfg = &non_null(config, "config")?.inner;
        let out = out_ptr(out, "out")?;
        let r = truth_table_experiment(cfg, threads).map_err(lib)?;
        let mut t = IontrapTruthTable {
            leakage: r.table.leakage,
            phi_time: r.phi_time,
            t0: r.t0,
            ..Default::default()
        };
        for i in 0..4 {
            for j in 0..4 {
                t.probabilities[4 * i + j] = r.table.probabilities[i][j];
                t.stderr[4 * i + j] = r.table.stderr[i][j];
            }
        }
        *out = t;
        Ok(IontrapStatus::Ok)
    })
}

// ------------------------------------------------------------------ fit

/// Options of [`iontrap_fit_flop`]; a zero-initialised struct gives the
/// defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IontrapFlopOptions {
    /// Constrain `W12 = sqrt(2) W01`.
    pub lock_sqrt2: bool,
    /// Starting `W01` in rad/s; `<= 0` means none.
    pub omega01_hint: f64,
    /// Keep both frequencies fixed at these values when both are `> 0`.
    pub fixed_omega01: f64,
    pub fixed_omega12: f64,
}

/// Flop-model fit result. `values` and `stderr` are ordered
/// `a_S0, a_D0, a_S1, a_D1, W01, W12`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IontrapFlopFit {
    pub values: [f64; 6],
    pub stderr: [f64; 6],
    pub ratio: f64,
    pub ratio_err: f64,
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
    pub rank_deficient: bool,
}

/// Fit `P_D(tau)` samples. `stderr` may be NULL (unweighted fit).
///
/// # Safety
/// `tau` and `p_d` (and `stderr` if non-NULL) must point to `len` doubles;
/// `options` may be NULL; `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn iontrap_fit_flop(
    tau: *const f64,
    p_d: *const f64,
    stderr: *const f64,
    len: usize,
    options: *const IontrapFlopOptions,
    out: *mut IontrapFlopFit,
) -> IontrapStatus {
    guard(|| {
        if tau.is_null() || p_d.is_null() {
            return Err((IontrapStatus::NullPointer, "tau or p_d is NULL".into()));
        }
        let out = out_ptr(out, "out")?;
        // SAFETY: the caller guarantees `len` readable elements.
        let (t, p) = unsafe {
            (
                std::slice::from_raw_parts(tau, len),
                std::slice::from_raw_parts(p_d, len),
            )
        };
        let e = if stderr.is_null() {
            None
        } else {
            // SAFETY: as above.
            Some(unsafe { std::slice::from_raw_parts(stderr, len) })
        };
        let data: Vec<Point> = (0..len).map(|i| (t[i], p[i], e.map_or(0.0, |e| e[i]))).collect();
        // SAFETY: the caller guarantees validity of non-null pointers.
        let o = unsafe { options.as_ref() }.copied().unwrap_or_default();
        let opts = FlopOptions {
            lock_sqrt2: o.lock_sqrt2,
            fixed_frequencies: (o.fixed_omega01 > 0.0 && o.fixed_omega12 > 0.0)
                .then_some((o.fixed_omega01, o.fixed_omega12)),
            omega01_hint: (o.omega01_hint > 0.0).then_some(o.omega01_hint),
        };
        let f = fit_flop(&data, opts).map_err(lib)?;
        let (ratio, ratio_err) = f.frequency_ratio();
        *out = IontrapFlopFit {
            values: f.values(),
            stderr: f.stderr(),
            ratio,
            ratio_err,
            chi2: f.chi2,
            dof: f.dof,
            converged: f.converged,
            rank_deficient: f.rank_deficient,
        };
        if f.converged {
            Ok(IontrapStatus::Ok)
        } else {
            set_error("fit did not converge");
            Ok(IontrapStatus::NotConverged)
        }
    })
}
