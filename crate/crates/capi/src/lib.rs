//! C ABI for the quantile-regression inference laboratory.
//!
//! Design rules:
//! - every fallible call returns a [`QrStatus`]; results travel through
//!   out-parameters, never return values;
//! - resources are opaque handles created and released by paired
//!   `*_free` functions; handles are never invalidated implicitly;
//! - the most recent failure message is kept per thread and retrieved with
//!   [`qr_last_error`];
//! - panics never unwind across the boundary: they are caught and reported
//!   as [`QrStatus::Panic`].
//!
//! The matching C header is generated into `include/qrlab.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::{DMatrix, DVector};
use qrlab_core::design::{load_dataset, Dataset};
use qrlab_core::inference::{
    confidence_interval, BandwidthRule, SparsityOrder, SparsitySource,
};
use qrlab_core::solver::{fit_rq, QuantileFit};
use qrlab_core::QrError;

/// Status code returned by every fallible function in this API.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QrStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument was outside its domain or inputs were inconsistent.
    InvalidInput = 3,
    /// The design matrix does not have full column rank.
    RankDeficient = 4,
    /// A matrix that must be invertible was singular.
    Singular = 5,
    /// The quantile solver failed to terminate cleanly.
    SolverFailure = 6,
    /// A combinatorial or enumeration budget was exceeded.
    BudgetExceeded = 7,
    /// A file could not be read.
    IoError = 8,
    /// Tabular input could not be parsed.
    ParseError = 9,
    /// A caller-provided buffer was too small for the result.
    BufferTooSmall = 10,
    /// An internal panic was caught at the boundary.
    Panic = 11,
}

/// Opaque dataset handle: a fixed design matrix and response vector.
pub struct QrDataset {
    inner: Dataset,
}

/// Opaque fit handle: one solved quantile regression.
pub struct QrFit {
    inner: QuantileFit,
}

/// A plug-in confidence interval for a linear contrast of the coefficients.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct QrInterval {
    /// Quantile level the interval is for.
    pub tau: f64,
    /// Point estimate of the contrast a'beta(tau).
    pub point: f64,
    /// Standard error of the point estimate.
    pub se: f64,
    /// Lower interval endpoint.
    pub lo: f64,
    /// Upper interval endpoint.
    pub hi: f64,
    /// One-sided tail mass alpha; the interval is two-sided level 1 - 2*alpha.
    pub alpha: f64,
    /// Standard normal quantile z such that P(Z > z) = alpha.
    pub z_alpha: f64,
    /// Difference-quotient bandwidth actually used (NaN when none applied).
    pub bandwidth: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_last_error(message: &str) {
    LAST_ERROR.with(|slot| {
        let mut bytes = slot.borrow_mut();
        bytes.clear();
        // NUL bytes inside the message would truncate it on the C side.
        bytes.extend(message.bytes().filter(|&b| b != 0));
        bytes.push(0);
    });
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().clear());
}

fn status_of(err: &QrError) -> QrStatus {
    match err {
        QrError::Io { .. } => QrStatus::IoError,
        QrError::Parse { .. }
        | QrError::MissingColumn { .. }
        | QrError::Config(_)
        | QrError::SchemaMismatch { .. } => QrStatus::ParseError,
        QrError::Invalid(_) | QrError::NonFinite { .. } | QrError::StudyAborted { .. } => {
            QrStatus::InvalidInput
        }
        QrError::Singular(_) => QrStatus::Singular,
        QrError::RankDeficient(_) => QrStatus::RankDeficient,
        QrError::Budget(_) => QrStatus::BudgetExceeded,
        QrError::SolverFailure { .. } => QrStatus::SolverFailure,
    }
}

fn fail(err: &QrError) -> QrStatus {
    set_last_error(&err.to_string());
    status_of(err)
}

fn fail_msg(status: QrStatus, message: &str) -> QrStatus {
    set_last_error(message);
    status
}

/// Run `f`, translating a panic into [`QrStatus::Panic`] instead of
/// unwinding across the C boundary.
fn guarded(f: impl FnOnce() -> QrStatus) -> QrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".to_string());
            fail_msg(QrStatus::Panic, &format!("internal panic: {msg}"))
        }
    }
}

/// # Safety
/// `ptr` must be null or a pointer to a NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, QrStatus> {
    if ptr.is_null() {
        return Err(fail_msg(
            QrStatus::NullArgument,
            &format!("{what} must not be null"),
        ));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        fail_msg(
            QrStatus::InvalidUtf8,
            &format!("{what} is not valid UTF-8"),
        )
    })
}

// ---------------------------------------------------------------------------
// Library information and error retrieval
// ---------------------------------------------------------------------------

/// Version of the library as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the current thread's last error message into `buf`.
///
/// Returns the number of bytes the full message needs, including the
/// terminating NUL; the copy is truncated (but still NUL-terminated) when
/// `cap` is smaller. After a successful call the message is the empty
/// string, so the return value is 1.
///
/// # Safety
/// `buf` must be null (to query the required size) or valid for writing
/// `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn qr_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let stored = slot.borrow();
        let bytes: &[u8] = if stored.is_empty() { &[0] } else { &stored };
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            // Guarantee termination even when truncating.
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Build a dataset from caller-owned arrays (the data is copied).
///
/// `y` holds `n_rows` responses. `x` holds `n_rows * n_covariates` values in
/// row-major order; it may be null when `n_covariates` is 0. When
/// `add_intercept` is true a leading column of ones is prepended, so the
/// fitted dimension is `n_covariates + 1`.
///
/// On success writes a new handle to `*out`; release it with
/// [`qr_dataset_free`].
///
/// # Safety
/// `y` must point to `n_rows` doubles, `x` to `n_rows * n_covariates`
/// doubles (or be null when `n_covariates` is 0), and `out` to a writable
/// pointer slot.
#[no_mangle]
pub unsafe extern "C" fn qr_dataset_from_arrays(
    y: *const f64,
    x: *const f64,
    n_rows: usize,
    n_covariates: usize,
    add_intercept: bool,
    out: *mut *mut QrDataset,
) -> QrStatus {
    guarded(|| {
        if out.is_null() || y.is_null() || (x.is_null() && n_covariates > 0) {
            return fail_msg(QrStatus::NullArgument, "y, x and out must not be null");
        }
        if n_covariates == 0 && !add_intercept {
            return fail_msg(
                QrStatus::InvalidInput,
                "need at least one covariate or an intercept",
            );
        }
        let yv = DVector::from_column_slice(std::slice::from_raw_parts(y, n_rows));
        let p = n_covariates + usize::from(add_intercept);
        let xs = if n_covariates > 0 {
            std::slice::from_raw_parts(x, n_rows * n_covariates)
        } else {
            &[]
        };
        let xm = DMatrix::from_fn(n_rows, p, |i, j| {
            if add_intercept && j == 0 {
                1.0
            } else {
                xs[i * n_covariates + (j - usize::from(add_intercept))]
            }
        });
        match Dataset::new(xm, yv, add_intercept) {
            Ok(inner) => {
                clear_last_error();
                *out = Box::into_raw(Box::new(QrDataset { inner }));
                QrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Load a dataset from a CSV file with a header row.
///
/// `y_column` names the response. `x_columns` is a comma-separated list of
/// covariate columns; null or empty means "no covariates" (an intercept-only
/// design when `add_intercept` is true).
///
/// On success writes a new handle to `*out`; release it with
/// [`qr_dataset_free`].
///
/// # Safety
/// `path` and `y_column` must be NUL-terminated strings; `x_columns` must be
/// null or NUL-terminated; `out` must point to a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn qr_dataset_load_csv(
    path: *const c_char,
    y_column: *const c_char,
    x_columns: *const c_char,
    add_intercept: bool,
    out: *mut *mut QrDataset,
) -> QrStatus {
    guarded(|| {
        if out.is_null() {
            return fail_msg(QrStatus::NullArgument, "out must not be null");
        }
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let y_column = match read_str(y_column, "y_column") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let xs: Vec<String> = if x_columns.is_null() {
            Vec::new()
        } else {
            match read_str(x_columns, "x_columns") {
                Ok(s) => s
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect(),
                Err(status) => return status,
            }
        };
        match load_dataset(path, y_column, &xs, add_intercept) {
            Ok(inner) => {
                clear_last_error();
                *out = Box::into_raw(Box::new(QrDataset { inner }));
                QrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of observations in the dataset (0 for a null handle).
///
/// # Safety
/// `data` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn qr_dataset_rows(data: *const QrDataset) -> usize {
    data.as_ref().map_or(0, |d| d.inner.n())
}

/// Number of design columns, intercept included (0 for a null handle).
///
/// # Safety
/// `data` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn qr_dataset_cols(data: *const QrDataset) -> usize {
    data.as_ref().map_or(0, |d| d.inner.p())
}

/// Release a dataset handle. Null is ignored.
///
/// # Safety
/// `data` must be null or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn qr_dataset_free(data: *mut QrDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Solve the quantile regression at level `tau` on `data`.
///
/// On success writes a new handle to `*out`; release it with
/// [`qr_fit_free`].
///
/// # Safety
/// `data` must be a live dataset handle and `out` must point to a writable
/// pointer slot.
#[no_mangle]
pub unsafe extern "C" fn qr_fit(
    data: *const QrDataset,
    tau: f64,
    out: *mut *mut QrFit,
) -> QrStatus {
    guarded(|| {
        let Some(data) = data.as_ref() else {
            return fail_msg(QrStatus::NullArgument, "data must not be null");
        };
        if out.is_null() {
            return fail_msg(QrStatus::NullArgument, "out must not be null");
        }
        match fit_rq(&data.inner, tau, None) {
            Ok(inner) => {
                clear_last_error();
                *out = Box::into_raw(Box::new(QrFit { inner }));
                QrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of fitted coefficients (0 for a null handle).
///
/// # Safety
/// `fit` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn qr_fit_dim(fit: *const QrFit) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.beta_hat.len())
}

/// Quantile level the fit was solved at (NaN for a null handle).
///
/// # Safety
/// `fit` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn qr_fit_tau(fit: *const QrFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.inner.tau)
}

/// Objective value at the optimum (NaN for a null handle).
///
/// # Safety
/// `fit` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn qr_fit_objective(fit: *const QrFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.inner.objective)
}

/// Whether the solution is degenerate (more than `dim` near-zero residuals
/// or a boundary optimality margin). False for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn qr_fit_degenerate(fit: *const QrFit) -> bool {
    fit.as_ref().is_some_and(|f| f.inner.degenerate)
}

/// Copy the fitted coefficients into `buf`.
///
/// # Safety
/// `fit` must be a live handle and `buf` valid for writing `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn qr_fit_coefficients(
    fit: *const QrFit,
    buf: *mut f64,
    cap: usize,
) -> QrStatus {
    copy_slice(fit, buf, cap, |f| f.inner.beta_hat.as_slice())
}

/// Copy the residuals (one per observation) into `buf`.
///
/// # Safety
/// `fit` must be a live handle and `buf` valid for writing `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn qr_fit_residuals(
    fit: *const QrFit,
    buf: *mut f64,
    cap: usize,
) -> QrStatus {
    copy_slice(fit, buf, cap, |f| f.inner.residuals.as_slice())
}

unsafe fn copy_slice(
    fit: *const QrFit,
    buf: *mut f64,
    cap: usize,
    pick: impl Fn(&QrFit) -> &[f64],
) -> QrStatus {
    guarded(|| {
        let Some(fit) = fit.as_ref() else {
            return fail_msg(QrStatus::NullArgument, "fit must not be null");
        };
        if buf.is_null() {
            return fail_msg(QrStatus::NullArgument, "buf must not be null");
        }
        let src = pick(fit);
        if cap < src.len() {
            return fail_msg(
                QrStatus::BufferTooSmall,
                &format!("need capacity {}, got {cap}", src.len()),
            );
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
        clear_last_error();
        QrStatus::Ok
    })
}

/// Release a fit handle. Null is ignored.
///
/// # Safety
/// `fit` must be null or a handle from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn qr_fit_free(fit: *mut QrFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Plug-in confidence interval for the contrast `a'beta(tau)`.
///
/// `contrast` may be null (with `contrast_len` 0) to select the first
/// coefficient; otherwise its length must equal the design dimension.
/// `order` picks the difference-quotient stencil: 1 (first order) or
/// 2 (second order). `bandwidth` fixes the quotient bandwidth; pass NaN
/// (or any non-positive value) to use the rate-optimal default rule.
///
/// # Safety
/// `data` must be a live dataset handle, `contrast` null or valid for
/// `contrast_len` doubles, and `out` valid for writing one `QrInterval`.
#[no_mangle]
pub unsafe extern "C" fn qr_confidence_interval(
    data: *const QrDataset,
    tau: f64,
    alpha: f64,
    contrast: *const f64,
    contrast_len: usize,
    order: u32,
    bandwidth: f64,
    out: *mut QrInterval,
) -> QrStatus {
    guarded(|| {
        let Some(data) = data.as_ref() else {
            return fail_msg(QrStatus::NullArgument, "data must not be null");
        };
        if out.is_null() || (contrast.is_null() && contrast_len > 0) {
            return fail_msg(QrStatus::NullArgument, "out and contrast must not be null");
        }
        let p = data.inner.p();
        let a = if contrast_len == 0 {
            let mut e1 = DVector::zeros(p);
            e1[0] = 1.0;
            e1
        } else {
            if contrast_len != p {
                return fail_msg(
                    QrStatus::InvalidInput,
                    &format!("contrast length {contrast_len} must equal the design dimension {p}"),
                );
            }
            DVector::from_column_slice(std::slice::from_raw_parts(contrast, contrast_len))
        };
        let order = match order {
            1 => SparsityOrder::First,
            2 => SparsityOrder::Second,
            other => {
                return fail_msg(
                    QrStatus::InvalidInput,
                    &format!("order must be 1 or 2, got {other}"),
                )
            }
        };
        let rule = if bandwidth.is_finite() && bandwidth > 0.0 {
            BandwidthRule::Fixed(bandwidth)
        } else {
            BandwidthRule::HallSheather { c: None }
        };
        let source = SparsitySource::DiffQuotient { order, rule };
        match confidence_interval(&data.inner, tau, &a, alpha, &source) {
            Ok(ci) => {
                clear_last_error();
                *out = QrInterval {
                    tau: ci.tau,
                    point: ci.point,
                    se: ci.se,
                    lo: ci.lo,
                    hi: ci.hi,
                    alpha: ci.alpha,
                    z_alpha: ci.z_alpha,
                    bandwidth: ci.bandwidth_used.unwrap_or(f64::NAN),
                };
                QrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
