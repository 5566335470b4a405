//! C ABI over `qshadow`.
//!
//! Every function returns a `QS_*` status code and writes results through out-pointers.
//! Handles are opaque and must be released with the matching `*_free`. The message of the
//! last failure on the calling thread is available from [`qs_last_error`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use qshadow::entropy::cat_fixed_counts;
use qshadow::geometry::TorusPoint;
use qshadow::harness::{self, parse_config, ExperimentConfig};
use qshadow::oseledets::{classify_block_with, lyapunov_spectrum, BlockParams, SplittingOptions};
use qshadow::systems::{make_system, SystemSpec};
use qshadow::Error;

pub const QS_OK: i32 = 0;
pub const QS_ERR_NULL: i32 = 1;
pub const QS_ERR_UTF8: i32 = 2;
pub const QS_ERR_CONFIG: i32 = 3;
pub const QS_ERR_INVALID: i32 = 4;
pub const QS_ERR_NUMERIC: i32 = 5;
pub const QS_ERR_IO: i32 = 6;
pub const QS_ERR_BUFFER: i32 = 7;
pub const QS_ERR_PANIC: i32 = 8;

/// A map from the registry.
pub struct QsSystem {
    inner: SystemSpec,
}

/// A validated experiment configuration.
pub struct QsConfig {
    inner: ExperimentConfig,
}

thread_local! {
    static LAST: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_last(msg: String) {
    LAST.with(|l| *l.borrow_mut() = msg);
}

fn code_of(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => QS_ERR_CONFIG,
        Error::Io(_) => QS_ERR_IO,
        Error::DimensionMismatch(..) | Error::UnknownSystem(_) | Error::InvalidParameter(..) | Error::Precondition(_) => {
            QS_ERR_INVALID
        }
        _ => QS_ERR_NUMERIC,
    }
}

struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(code_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QS_OK,
        Ok(Err(Fail(c, m))) => {
            set_last(m);
            c
        }
        Err(_) => {
            set_last("panic inside qshadow".into());
            QS_ERR_PANIC
        }
    }
}

fn null() -> Fail {
    Fail(QS_ERR_NULL, "null pointer argument".into())
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(QS_ERR_UTF8, "argument is not UTF-8".into()))
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn sys_ref<'a>(s: *const QsSystem) -> Result<&'a SystemSpec, Fail> {
    s.as_ref().map(|s| &s.inner).ok_or_else(null)
}

unsafe fn cfg_ref<'a>(c: *const QsConfig) -> Result<&'a ExperimentConfig, Fail> {
    c.as_ref().map(|c| &c.inner).ok_or_else(null)
}

fn point(sys: &SystemSpec, x: &[f64]) -> Result<TorusPoint, Fail> {
    if x.len() != sys.dimension {
        return Err(Error::DimensionMismatch(x.len(), sys.dimension).into());
    }
    Ok(TorusPoint::new(x.to_vec()))
}

/// Copies `s` plus a terminating NUL into `buf`; `QS_ERR_BUFFER` if it does not fit.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(null());
    }
    if s.len() + 1 > cap {
        return Err(Fail(QS_ERR_BUFFER, format!("need {} bytes", s.len() + 1)));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Message of the last failed call on this thread.
///
/// # Safety
/// `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn qs_last_error(buf: *mut c_char, cap: usize) -> i32 {
    let msg = LAST.with(|l| l.borrow().clone());
    guard(|| write_str(&msg, buf, cap))
}

/// Creates a registry system. Pass NaN for `alpha_rot` or `nu` to keep the defaults.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qs_system_new(name: *const c_char, alpha_rot: f64, nu: f64, out: *mut *mut QsSystem) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let name = text(name)?;
        let mut p = BTreeMap::new();
        if !alpha_rot.is_nan() {
            p.insert("alpha_rot".to_string(), alpha_rot);
        }
        if !nu.is_nan() {
            p.insert("nu".to_string(), nu);
        }
        let inner = make_system(name, &p)?;
        *out = Box::into_raw(Box::new(QsSystem { inner }));
        Ok(())
    })
}

/// # Safety
/// `sys` must come from [`qs_system_new`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn qs_system_free(sys: *mut QsSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// # Safety
/// `sys` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qs_system_dimension(sys: *const QsSystem, out: *mut usize) -> i32 {
    guard(|| {
        let s = sys_ref(sys)?;
        if out.is_null() {
            return Err(null());
        }
        *out = s.dimension;
        Ok(())
    })
}

/// Applies `f^n` (negative `n` for the inverse) to `x` in place.
///
/// # Safety
/// `x` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn qs_system_iterate(sys: *const QsSystem, x: *mut f64, len: usize, n: i64) -> i32 {
    guard(|| {
        let s = sys_ref(sys)?;
        if x.is_null() {
            return Err(null());
        }
        let v = std::slice::from_raw_parts_mut(x, len);
        let p = point(s, v)?;
        let y = s.evaluate(&p, n)?;
        v.copy_from_slice(y.coords());
        Ok(())
    })
}

/// Lyapunov exponents at `x` over `horizon` steps, written in decreasing order to `out`.
///
/// # Safety
/// `x` and `out` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn qs_lyapunov(sys: *const QsSystem, x: *const f64, len: usize, horizon: usize, out: *mut f64) -> i32 {
    guard(|| {
        let s = sys_ref(sys)?;
        let p = point(s, slice(x, len)?)?;
        if out.is_null() {
            return Err(null());
        }
        let sp = lyapunov_spectrum(s, &p, horizon)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&sp.exponents);
        Ok(())
    })
}

/// Smallest block index `k <= k_max` certified at `x` with default rates.
///
/// # Safety
/// `x` must point to `len` doubles, `kappa` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qs_classify_block(
    sys: *const QsSystem,
    x: *const f64,
    len: usize,
    horizon: usize,
    k_max: u32,
    kappa: *mut u32,
) -> i32 {
    guard(|| {
        let s = sys_ref(sys)?;
        let p = point(s, slice(x, len)?)?;
        if kappa.is_null() {
            return Err(null());
        }
        let c = classify_block_with(s, &p, &BlockParams::default(), horizon, k_max, &SplittingOptions::default())?;
        *kappa = c.kappa;
        Ok(())
    })
}

/// Number of fixed points of the `n`-th iterate of the cat map.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qs_cat_fixed_count(n: usize, out: *mut f64) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        *out = cat_fixed_counts(&[n])[0];
        Ok(())
    })
}

/// Parses and validates a TOML configuration.
///
/// # Safety
/// `toml` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn qs_config_parse(toml: *const c_char, out: *mut *mut QsConfig) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let inner = parse_config(text(toml)?)?;
        inner.validate()?;
        *out = Box::into_raw(Box::new(QsConfig { inner }));
        Ok(())
    })
}

/// Default configuration for a registry system.
///
/// # Safety
/// `system` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn qs_config_default(system: *const c_char, out: *mut *mut QsConfig) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let inner = ExperimentConfig::minimal(text(system)?);
        inner.validate()?;
        *out = Box::into_raw(Box::new(QsConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn qs_config_free(cfg: *mut QsConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `cfg` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qs_config_set_seed(cfg: *mut QsConfig, seed: u64) -> i32 {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(null)?;
        c.inner.seed = seed;
        Ok(())
    })
}

/// SHA-256 hex digest of the canonical configuration (65 bytes with the NUL).
///
/// # Safety
/// `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn qs_config_hash(cfg: *const QsConfig, buf: *mut c_char, cap: usize) -> i32 {
    guard(|| write_str(&cfg_ref(cfg)?.hash(), buf, cap))
}

/// Runs a subcommand and writes its artifacts under `out_dir`; `pass` receives 1 or 0.
///
/// # Safety
/// Strings must be NUL-terminated and `pass` valid.
#[no_mangle]
pub unsafe extern "C" fn qs_run(cfg: *const QsConfig, subcommand: *const c_char, out_dir: *const c_char, jobs: u32, pass: *mut i32) -> i32 {
    guard(|| {
        let c = cfg_ref(cfg)?;
        let sub = text(subcommand)?;
        let dir = text(out_dir)?;
        if pass.is_null() {
            return Err(null());
        }
        let ok = harness::run(sub, c, Path::new(dir), jobs as usize)?;
        *pass = ok as i32;
        Ok(())
    })
}
