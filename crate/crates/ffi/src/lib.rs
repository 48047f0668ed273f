//! C interface to the RKHS channel estimator.
//!
//! Handles are opaque and owned by the caller; every function returns an [`RkhsStatus`]
//! and leaves a message for [`rkhs_last_error`] on failure. Complex vectors are
//! interleaved `double` pairs in the crate-wide vectorization order
//! (frequency slowest, then antenna row, then column).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rkhs_chest::channel_model::{ArrayGeometry, OfdmGrid};
use rkhs_chest::kernel_factory::{DelayBeamGrid, LowRankFactors};
use rkhs_chest::fast_operators::FastForwardOperator;
use rkhs_chest::sparse_estimator::{estimate_channel, RkhsSettings};
use rkhs_chest::unfolded_estimator::{dd_estimate, load_params_for, UnfoldedParams};
use rkhs_chest::{Error, C64};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RkhsStatus {
    Ok = 0,
    InvalidArgument = 1,
    ShapeMismatch = 2,
    Diverged = 3,
    SizeGuard = 4,
    Parse = 5,
    Io = 6,
    ZeroTruth = 7,
    EmptyDataset = 8,
    UnknownEstimator = 9,
    NullPointer = 10,
    Panic = 11,
}

impl From<&Error> for RkhsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => RkhsStatus::InvalidArgument,
            Error::ShapeMismatch { .. } => RkhsStatus::ShapeMismatch,
            Error::Diverged { .. } => RkhsStatus::Diverged,
            Error::SizeGuard { .. } => RkhsStatus::SizeGuard,
            Error::Parse { .. } => RkhsStatus::Parse,
            Error::Io { .. } => RkhsStatus::Io,
            Error::ZeroTruth => RkhsStatus::ZeroTruth,
            Error::EmptyDataset => RkhsStatus::EmptyDataset,
            Error::UnknownEstimator { .. } => RkhsStatus::UnknownEstimator,
        }
    }
}

/// System description for [`rkhs_operator_new`]. Element spacings are in wavelengths.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RkhsSystem {
    pub n_subcarriers: usize,
    pub subcarrier_spacing_hz: f64,
    pub carrier_frequency_hz: f64,
    pub pilot_stride: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_spacing_wavelengths: f64,
    pub col_spacing_wavelengths: f64,
    pub rank: usize,
    pub oversampling: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RkhsDims {
    /// Complex entries of a pilot measurement vector.
    pub measurement_len: usize,
    /// Complex entries of a full-band channel estimate.
    pub channel_len: usize,
    pub n_boxes: usize,
}

/// Precomputed kernel factors and FFT plans for one system.
pub struct RkhsOperator {
    op: FastForwardOperator,
    settings: RkhsSettings,
}

/// Unfolded-estimator parameter schedule bound to an operator's box grid.
pub struct RkhsSchedule {
    params: UnfoldedParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), RkhsStatus>) -> RkhsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RkhsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            RkhsStatus::Panic
        }
    }
}

fn fail(e: Error) -> RkhsStatus {
    set_error(&e.to_string());
    RkhsStatus::from(&e)
}

fn null(what: &str) -> RkhsStatus {
    set_error(&format!("null pointer: {what}"));
    RkhsStatus::NullPointer
}

unsafe fn complex_in(ptr: *const f64, len: usize) -> Result<Vec<C64>, RkhsStatus> {
    if ptr.is_null() {
        return Err(null("input vector"));
    }
    let s = std::slice::from_raw_parts(ptr, 2 * len);
    Ok(s.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect())
}

unsafe fn complex_out(ptr: *mut f64, len: usize, values: &[C64]) -> Result<(), RkhsStatus> {
    if ptr.is_null() {
        return Err(null("output vector"));
    }
    if len != values.len() {
        return Err(fail(Error::ShapeMismatch {
            what: "output buffer",
            expected: values.len().to_string(),
            found: len.to_string(),
        }));
    }
    let out = std::slice::from_raw_parts_mut(ptr, 2 * len);
    for (o, v) in out.chunks_exact_mut(2).zip(values) {
        o[0] = v.re;
        o[1] = v.im;
    }
    Ok(())
}

unsafe fn str_in<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, RkhsStatus> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        RkhsStatus::InvalidArgument
    })
}

/// Message of the most recent failure on this thread; valid until the next call.
#[no_mangle]
pub extern "C" fn rkhs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds an operator with default estimator settings.
///
/// # Safety
/// `system` must point to a valid [`RkhsSystem`] and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn rkhs_operator_new(system: *const RkhsSystem, out: *mut *mut RkhsOperator) -> RkhsStatus {
    guard(|| {
        if system.is_null() {
            return Err(null("system"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let s = &*system;
        let build = || -> rkhs_chest::Result<FastForwardOperator> {
            let grid = OfdmGrid::new(s.n_subcarriers, s.subcarrier_spacing_hz, s.carrier_frequency_hz, s.pilot_stride)?;
            let lam = grid.wavelength_m();
            let geom = ArrayGeometry::uniform(s.n_rows, s.n_cols, s.row_spacing_wavelengths * lam, s.col_spacing_wavelengths * lam)?;
            let dbg = DelayBeamGrid::nyquist(&grid, &geom, s.oversampling)?;
            FastForwardOperator::new(LowRankFactors::from_system(&grid, &geom, &dbg, s.rank)?)
        };
        let op = build().map_err(fail)?;
        let settings = RkhsSettings {
            rank: s.rank,
            oversampling: s.oversampling,
            ..RkhsSettings::default()
        };
        *out = Box::into_raw(Box::new(RkhsOperator { op, settings }));
        Ok(())
    })
}

/// # Safety
/// `op` must come from [`rkhs_operator_new`] and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rkhs_operator_free(op: *mut RkhsOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// # Safety
/// `op` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rkhs_operator_dims(op: *const RkhsOperator, out: *mut RkhsDims) -> RkhsStatus {
    guard(|| {
        let op = op.as_ref().ok_or_else(|| null("op"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = RkhsDims {
            measurement_len: op.op.measurement_len(),
            channel_len: op.op.full_shape().len(),
            n_boxes: op.op.n_boxes(),
        };
        Ok(())
    })
}

/// Replaces the estimator settings from a JSON object; absent fields take defaults.
/// The `rank` and `oversampling` fields must match the operator.
///
/// # Safety
/// `op` must be a live handle and `json` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rkhs_operator_set_settings(op: *mut RkhsOperator, json: *const c_char) -> RkhsStatus {
    guard(|| {
        let op = op.as_mut().ok_or_else(|| null("op"))?;
        let text = str_in(json, "settings")?;
        let settings: RkhsSettings = serde_json::from_str(text).map_err(|e| fail(Error::Parse {
            field: "settings".into(),
            message: e.to_string(),
        }))?;
        settings.validate().map_err(fail)?;
        if settings.rank != op.op.factors().rank || settings.oversampling != op.settings.oversampling {
            return Err(fail(Error::InvalidArgument(
                "settings rank and oversampling must match the operator".into(),
            )));
        }
        op.settings = settings;
        Ok(())
    })
}

/// Estimates the full-band channel from pilot measurements.
///
/// # Safety
/// `y` must hold `2·y_len` doubles and `out` `2·out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rkhs_estimate(
    op: *const RkhsOperator,
    y: *const f64,
    y_len: usize,
    noise_variance: f64,
    out: *mut f64,
    out_len: usize,
) -> RkhsStatus {
    guard(|| {
        let op = op.as_ref().ok_or_else(|| null("op"))?;
        let y = complex_in(y, y_len)?;
        let s = &op.settings;
        let h = estimate_channel(&op.op, &y, &s.regularizer(noise_variance), &s.solver(noise_variance, &op.op)).map_err(fail)?;
        complex_out(out, out_len, h.values())
    })
}

/// Loads a parameter schedule and checks it against the operator's box grid.
///
/// # Safety
/// `op` must be a live handle, `path` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rkhs_schedule_load(op: *const RkhsOperator, path: *const c_char, out: *mut *mut RkhsSchedule) -> RkhsStatus {
    guard(|| {
        let op = op.as_ref().ok_or_else(|| null("op"))?;
        let path = PathBuf::from(str_in(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let params = load_params_for(&path, &op.op).map_err(fail)?;
        *out = Box::into_raw(Box::new(RkhsSchedule { params }));
        Ok(())
    })
}

/// # Safety
/// `schedule` must come from [`rkhs_schedule_load`] and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rkhs_schedule_free(schedule: *mut RkhsSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Runs the unfolded estimator with a loaded schedule.
///
/// # Safety
/// Same buffer rules as [`rkhs_estimate`].
#[no_mangle]
pub unsafe extern "C" fn rkhs_dd_estimate(
    op: *const RkhsOperator,
    schedule: *const RkhsSchedule,
    y: *const f64,
    y_len: usize,
    out: *mut f64,
    out_len: usize,
) -> RkhsStatus {
    guard(|| {
        let op = op.as_ref().ok_or_else(|| null("op"))?;
        let schedule = schedule.as_ref().ok_or_else(|| null("schedule"))?;
        let y = complex_in(y, y_len)?;
        let h = dd_estimate(&op.op, &y, &schedule.params).map_err(fail)?;
        complex_out(out, out_len, h.values())
    })
}
