//! C ABI over `xce-core`.
//!
//! Every function returns an [`XceStatus`]; on failure the message is
//! available from [`xce_last_error`] on the same thread. Complex vectors
//! cross the boundary as interleaved `re, im` doubles, so a length-`M`
//! vector occupies `2·M` doubles. Handles are opaque and must be released
//! with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use xce_core::baselines::nmse;
use xce_core::channel::{rayleigh_distance, steer_far, steer_near, ArrayConfig};
use xce_core::cli::ExperimentConfig;
use xce_core::model::{forward_batch, load_weights, ModelParams};
use xce_core::numerics::ComplexVector;
use xce_core::XceError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XceStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SingularMatrix = 3,
    Shape = 4,
    DegenerateChannel = 5,
    Config = 6,
    Format = 7,
    Contract = 8,
    NonFinite = 9,
    Io = 10,
    Panic = 11,
}

impl From<&XceError> for XceStatus {
    fn from(e: &XceError) -> Self {
        match e {
            XceError::InvalidArgument(_) => XceStatus::InvalidArgument,
            XceError::SingularMatrix(_) => XceStatus::SingularMatrix,
            XceError::Shape(_) => XceStatus::Shape,
            XceError::DegenerateChannel(_) => XceStatus::DegenerateChannel,
            XceError::Config(_) => XceStatus::Config,
            XceError::Format(_) => XceStatus::Format,
            XceError::Contract(_) => XceStatus::Contract,
            XceError::NonFinite { .. } => XceStatus::NonFinite,
            XceError::Io(_) => XceStatus::Io,
        }
    }
}

/// Uniform linear array.
pub struct XceArray(ArrayConfig);

/// Loaded estimator weights.
pub struct XceModel(ModelParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Fail {
    Null(&'static str),
    Core(XceError),
}

impl From<XceError> for Fail {
    fn from(e: XceError) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> XceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            XceStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            XceStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(format!("{}: {}", e.code(), e));
            XceStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            XceStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn write_vector(v: &ComplexVector, out: &mut [f64]) -> Result<(), Fail> {
    if out.len() != 2 * v.len() {
        return Err(XceError::Shape(format!("output holds {} doubles, need {}", out.len(), 2 * v.len())).into());
    }
    out.copy_from_slice(&v.to_interleaved());
    Ok(())
}

unsafe fn path_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| XceError::InvalidArgument(format!("{what} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn xce_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xce_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn xce_array_new(antennas: usize, wavelength: f64, out: *mut *mut XceArray) -> XceStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let a = ArrayConfig::new(antennas, wavelength)?;
        *out = Box::into_raw(Box::new(XceArray(a)));
        Ok(())
    })
}

/// # Safety
/// `array` must come from [`xce_array_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xce_array_free(array: *mut XceArray) {
    if !array.is_null() {
        drop(Box::from_raw(array));
    }
}

/// `2·D²/λ` for the array aperture `D`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn xce_rayleigh_distance(array: *const XceArray, out: *mut f64) -> XceStatus {
    guard(|| {
        let a = deref(array, "array")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = rayleigh_distance(&a.0);
        Ok(())
    })
}

/// Far-field steering vector into `out` (`out_len` = 2·M doubles).
///
/// # Safety
/// `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn xce_steer_far(array: *const XceArray, theta: f64, out: *mut f64, out_len: usize) -> XceStatus {
    guard(|| {
        let a = deref(array, "array")?;
        let out = slice_mut(out, out_len, "out")?;
        write_vector(&steer_far(&a.0, theta)?, out)
    })
}

/// Near-field steering vector at distance `r` metres.
///
/// # Safety
/// `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn xce_steer_near(array: *const XceArray, theta: f64, r: f64, out: *mut f64, out_len: usize) -> XceStatus {
    guard(|| {
        let a = deref(array, "array")?;
        let out = slice_mut(out, out_len, "out")?;
        write_vector(&steer_near(&a.0, theta, r)?, out)
    })
}

/// `‖h − ĥ‖² / ‖h‖²` for two length-`m` complex vectors.
///
/// # Safety
/// `h_true` and `h_hat` must each point to `2·m` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn xce_nmse(h_true: *const f64, h_hat: *const f64, m: usize, out: *mut f64) -> XceStatus {
    guard(|| {
        let t = ComplexVector::from_interleaved(slice(h_true, 2 * m, "h_true")?)?;
        let e = ComplexVector::from_interleaved(slice(h_hat, 2 * m, "h_hat")?)?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = nmse(&t, &e)?;
        Ok(())
    })
}

/// Loads `XCEW1` weights. The architecture comes from the experiment
/// config at `config_path`, or the defaults when it is null.
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xce_model_load(weights_path: *const c_char, config_path: *const c_char, out: *mut *mut XceModel) -> XceStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let weights = path_arg(weights_path, "weights_path")?;
        let cfg = if config_path.is_null() { ExperimentConfig::default() } else { ExperimentConfig::load(path_arg(config_path, "config_path")?)? };
        let params = load_weights(weights, &cfg.model_config())?;
        *out = Box::into_raw(Box::new(XceModel(params)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`xce_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xce_model_free(model: *mut XceModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of antennas the model expects.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn xce_model_antennas(model: *const XceModel, out: *mut usize) -> XceStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = m.0.config().m;
        Ok(())
    })
}

/// Denoises `batch` LS observations laid out back to back, each `2·M`
/// doubles, into `out` with the same layout.
///
/// # Safety
/// `h_ls` and `out` must each point to `batch·2·M` doubles.
#[no_mangle]
pub unsafe extern "C" fn xce_model_estimate(model: *const XceModel, h_ls: *const f64, batch: usize, out: *mut f64) -> XceStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let n = 2 * m.0.config().m;
        let input = slice(h_ls, batch * n, "h_ls")?;
        let out = slice_mut(out, batch * n, "out")?;
        if batch == 0 {
            return Ok(());
        }
        let obs = input.chunks_exact(n).map(ComplexVector::from_interleaved).collect::<Result<Vec<_>, _>>()?;
        let est = forward_batch(&obs, &m.0)?;
        for (dst, v) in out.chunks_exact_mut(n).zip(&est) {
            write_vector(v, dst)?;
        }
        Ok(())
    })
}
