// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over the `twophase` estimation core.
//!
//! Objects are opaque handles created by `tp_*_new` / `tp_fit_mle` and
//! released with the matching `tp_*_free`. Every fallible call returns a
//! [`TpStatus`]; the message of the last failure on the calling thread is
//! available through [`tp_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use twophase::estimate::{observed_information, score};
use twophase::model::log_likelihood;
use twophase::{
    asymptotic_information, empirical_information, fit_mle, Dataset, Domain, Error, FitFlag,
    FitResult, InfoMatrix, LimitDesign, Theta,
};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TpStatus {
    Ok = 0,
    InvalidInput = 1,
    Precondition = 2,
    NonDifferentiable = 3,
    SingularInformation = 4,
    Numerical = 5,
    NullPointer = 6,
    Panic = 7,
    Other = 8,
}

/// Fit flag bits reported by [`tp_fit_flags`].
pub const TP_FLAG_DEGENERATE_GAMMA_ZERO: u32 = 1;
pub const TP_FLAG_SIGMA2_ZERO: u32 = 2;
pub const TP_FLAG_BREAKPOINT_AT_BOUNDARY: u32 = 4;
pub const TP_FLAG_EMPTY_ACTIVE_SET: u32 = 8;

/// Opaque dataset handle.
pub struct TpDataset(Dataset);

/// Opaque fit handle.
pub struct TpFit(FitResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TpStatus {
    match e {
        Error::InvalidInput(_) | Error::Csv { .. } | Error::Config(_) => TpStatus::InvalidInput,
        Error::Precondition(_) | Error::FlaggedFit(_) | Error::EmptyPseudoDataset { .. } => {
            TpStatus::Precondition
        }
        Error::NonDifferentiable { .. } => TpStatus::NonDifferentiable,
        Error::SingularInformation(_) => TpStatus::SingularInformation,
        Error::Quadrature { .. }
        | Error::GridCoverage { .. }
        | Error::StepSize
        | Error::InfiniteMoment { .. } => TpStatus::Numerical,
        Error::Io(_) | Error::File { .. } => TpStatus::Other,
    }
}

// Runs `f`, translating errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), Error>>(f: F) -> TpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TpStatus::Ok,
        Ok(Err(e)) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            TpStatus::Panic
        }
    }
}

fn null_error(what: &str) -> Error {
    Error::InvalidInput(format!("{what} is a null pointer"))
}

macro_rules! require {
    ($p:expr, $name:expr) => {
        if $p.is_null() {
            set_error(format!("{} is a null pointer", $name));
            return TpStatus::NullPointer;
        }
    };
}

fn write_matrix(m: &InfoMatrix, out: *mut f64) {
    let a = m.as_array();
    for i in 0..3 {
        for j in 0..3 {
            // SAFETY: callers check `out` points to 9 writable doubles.
            unsafe { *out.add(3 * i + j) = a[i][j] };
        }
    }
}

/// Copies `n` temperatures and responses into a new dataset (sorted by
/// temperature).
///
/// # Safety
/// `t` and `x` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_dataset_new(
    t: *const f64,
    x: *const f64,
    n: usize,
    out: *mut *mut TpDataset,
) -> TpStatus {
    require!(out, "out");
    unsafe { *out = ptr::null_mut() };
    require!(t, "t");
    require!(x, "x");
    guard(|| {
        // SAFETY: the caller guarantees n readable elements.
        let (ts, xs) = unsafe {
            (
                std::slice::from_raw_parts(t, n),
                std::slice::from_raw_parts(x, n),
            )
        };
        let d = Dataset::new(ts.to_vec(), xs.to_vec())?;
        unsafe { *out = Box::into_raw(Box::new(TpDataset(d))) };
        Ok(())
    })
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `d` must come from [`tp_dataset_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tp_dataset_free(d: *mut TpDataset) {
    if !d.is_null() {
        drop(unsafe { Box::from_raw(d) });
    }
}

/// Number of observations (0 for null).
///
/// # Safety
/// `d` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn tp_dataset_len(d: *const TpDataset) -> usize {
    unsafe { d.as_ref() }.map_or(0, |d| d.0.len())
}

/// Profile maximum-likelihood fit on the domain `[lower, upper]`.
///
/// # Safety
/// `d` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_fit_mle(
    d: *const TpDataset,
    lower: f64,
    upper: f64,
    out: *mut *mut TpFit,
) -> TpStatus {
    require!(out, "out");
    unsafe { *out = ptr::null_mut() };
    require!(d, "dataset");
    guard(|| {
        let data = &unsafe { &*d }.0;
        let domain = Domain::new(lower, upper)?;
        let fit = fit_mle(data, &domain)?;
        unsafe { *out = Box::into_raw(Box::new(TpFit(fit))) };
        Ok(())
    })
}

/// Releases a fit; null is ignored.
///
/// # Safety
/// `f` must come from [`tp_fit_mle`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tp_fit_free(f: *mut TpFit) {
    if !f.is_null() {
        drop(unsafe { Box::from_raw(f) });
    }
}

/// Writes `(gamma, u, sigma2)` of the estimate to `out[0..3]`.
///
/// # Safety
/// `f` must be a live fit handle; `out` must hold 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn tp_fit_theta(f: *const TpFit, out: *mut f64) -> TpStatus {
    require!(f, "fit");
    require!(out, "out");
    let t = unsafe { &*f }.0.theta_hat.to_array();
    for (k, v) in t.iter().enumerate() {
        unsafe { *out.add(k) = *v };
    }
    TpStatus::Ok
}

/// Residual sum of squares at the estimate (NaN for null).
///
/// # Safety
/// `f` must be null or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn tp_fit_rss(f: *const TpFit) -> f64 {
    unsafe { f.as_ref() }.map_or(f64::NAN, |f| f.0.rss)
}

/// Maximised log-likelihood (`+inf` for an exact fit, NaN for null).
///
/// # Safety
/// `f` must be null or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn tp_fit_loglik(f: *const TpFit) -> f64 {
    unsafe { f.as_ref() }.map_or(f64::NAN, |f| f.0.loglik)
}

/// Bitmask of `TP_FLAG_*` values (0 for a clean fit or null).
///
/// # Safety
/// `f` must be null or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn tp_fit_flags(f: *const TpFit) -> u32 {
    let Some(f) = (unsafe { f.as_ref() }) else {
        return 0;
    };
    f.0.flags
        .iter()
        .map(|fl| match fl {
            FitFlag::DegenerateGammaZero => TP_FLAG_DEGENERATE_GAMMA_ZERO,
            FitFlag::Sigma2Zero => TP_FLAG_SIGMA2_ZERO,
            FitFlag::BreakpointAtBoundary => TP_FLAG_BREAKPOINT_AT_BOUNDARY,
            FitFlag::EmptyActiveSet => TP_FLAG_EMPTY_ACTIVE_SET,
        })
        .fold(0, |a, b| a | b)
}

/// Log-likelihood of the data at `(gamma, u, sigma2)`.
///
/// # Safety
/// `d` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_log_likelihood(
    d: *const TpDataset,
    gamma: f64,
    u: f64,
    sigma2: f64,
    out: *mut f64,
) -> TpStatus {
    require!(d, "dataset");
    require!(out, "out");
    guard(|| {
        let v = log_likelihood(&Theta::new(gamma, u, sigma2), &unsafe { &*d }.0)?;
        unsafe { *out = v };
        Ok(())
    })
}

/// Score vector at `(gamma, u, sigma2)`; fails at a knot.
///
/// # Safety
/// `d` must be a live dataset handle; `out` must hold 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn tp_score(
    d: *const TpDataset,
    gamma: f64,
    u: f64,
    sigma2: f64,
    out: *mut f64,
) -> TpStatus {
    require!(d, "dataset");
    require!(out, "out");
    guard(|| {
        let s = score(&Theta::new(gamma, u, sigma2), &unsafe { &*d }.0)?;
        for (k, v) in s.iter().enumerate() {
            unsafe { *out.add(k) = *v };
        }
        Ok(())
    })
}

/// Which information matrix [`tp_information`] computes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TpInfoKind {
    /// Averages over the observed temperatures.
    Empirical = 0,
    /// Observed information divided by n.
    Observed = 1,
    /// Limit under the uniform design on `[lower, upper]`.
    AsymptoticUniform = 2,
}

/// Information matrix at `(gamma, u, sigma2)` written row-major to `out[0..9]`.
/// `d` may be null for [`TpInfoKind::AsymptoticUniform`].
///
/// # Safety
/// `d` must be null or a live dataset handle; `out` must hold 9 doubles.
#[no_mangle]
pub unsafe extern "C" fn tp_information(
    d: *const TpDataset,
    kind: TpInfoKind,
    gamma: f64,
    u: f64,
    sigma2: f64,
    lower: f64,
    upper: f64,
    out: *mut f64,
) -> TpStatus {
    require!(out, "out");
    guard(|| {
        let theta = Theta::new(gamma, u, sigma2);
        let data = || {
            unsafe { d.as_ref() }
                .map(|d| &d.0)
                .ok_or_else(|| null_error("dataset"))
        };
        let m = match kind {
            TpInfoKind::Empirical => empirical_information(&theta, data()?)?,
            TpInfoKind::Observed => {
                let data = data()?;
                observed_information(&theta, data)?.scaled(1.0 / data.len() as f64)
            }
            TpInfoKind::AsymptoticUniform => {
                asymptotic_information(&theta, &LimitDesign::uniform(Domain::new(lower, upper)?))?
            }
        };
        write_matrix(&m, out);
        Ok(())
    })
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len` bytes) and returns the full message length excluding
/// the terminator; 0 when no error has occurred.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
