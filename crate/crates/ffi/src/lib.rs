//! C ABI over the separator. Models are opaque handles; every call returns
//! an [`SrStatus`] and leaves a message for [`sr_last_error`] on failure.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use sepreformer::checkpoint;
use sepreformer::codec::Waveform;
use sepreformer::evaluation;
use sepreformer::objectives;
use sepreformer::separator::{ModelConfig, Separator};
use sepreformer::{Error, ErrorKind};

/// Result of every call. Values match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrStatus {
    Ok = 0,
    ConfigError = 2,
    DataError = 3,
    NumericError = 4,
    NullPointer = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque separator handle.
pub struct SrModel {
    inner: Separator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SrStatus, msg: impl Into<String>) -> SrStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> SrStatus {
    let status = match e.kind() {
        ErrorKind::Config => SrStatus::ConfigError,
        ErrorKind::Data => SrStatus::DataError,
        ErrorKind::Numeric => SrStatus::NumericError,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> SrStatus) -> SrStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SrStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SrStatus> {
    if p.is_null() {
        return Err(fail(SrStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SrStatus::ConfigError, format!("{what} is not UTF-8")))
}

/// Message describing the last failure on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn sr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_model_load(path: *const c_char, out: *mut *mut SrModel) -> SrStatus {
    guard(|| {
        if out.is_null() {
            return fail(SrStatus::NullPointer, "out is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match checkpoint::load(Path::new(path)) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(SrModel { inner: c.model }));
                SrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Build a freshly initialized model from a named preset.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_model_from_preset(preset: *const c_char, seed: u64, out: *mut *mut SrModel) -> SrStatus {
    guard(|| {
        if out.is_null() {
            return fail(SrStatus::NullPointer, "out is null");
        }
        let name = match str_arg(preset, "preset") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ModelConfig::preset(name).and_then(|c| Separator::new(c, None, seed)) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(SrModel { inner: m }));
                SrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sr_model_free(model: *mut SrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Speakers produced per call to [`sr_separate`]; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sr_model_speakers(model: *const SrModel) -> u32 {
    model.as_ref().map_or(0, |m| m.inner.config.speakers as u32)
}

/// Expected input sample rate; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sr_model_sample_rate(model: *const SrModel) -> u32 {
    model.as_ref().map_or(0, |m| m.inner.config.sample_rate)
}

/// Inference parameter count; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sr_model_num_params(model: *const SrModel) -> u64 {
    model.as_ref().map_or(0, |m| m.inner.num_inference_params() as u64)
}

/// Separate `n` samples into `speakers * n` outputs, speaker-major.
///
/// # Safety
/// `input` must point to `n` floats and `output` to `output_len` floats.
#[no_mangle]
pub unsafe extern "C" fn sr_separate(
    model: *const SrModel,
    input: *const f32,
    n: usize,
    output: *mut f32,
    output_len: usize,
) -> SrStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(SrStatus::NullPointer, "model is null");
        };
        if input.is_null() || output.is_null() {
            return fail(SrStatus::NullPointer, "buffer is null");
        }
        let j = m.inner.config.speakers;
        if output_len < j * n {
            return fail(SrStatus::BufferTooSmall, format!("output needs {} floats, got {output_len}", j * n));
        }
        let x = match Waveform::new(slice::from_raw_parts(input, n).to_vec(), m.inner.config.sample_rate) {
            Ok(x) => x,
            Err(e) => return from_error(e),
        };
        match m.inner.separate(&x) {
            Ok(ests) => {
                let out = slice::from_raw_parts_mut(output, j * n);
                for (k, e) in ests.iter().enumerate() {
                    out[k * n..(k + 1) * n].copy_from_slice(&e.samples);
                }
                SrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Inference parameter count of a named preset.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_preset_param_count(preset: *const c_char, out: *mut u64) -> SrStatus {
    guard(|| {
        if out.is_null() {
            return fail(SrStatus::NullPointer, "out is null");
        }
        let name = match str_arg(preset, "preset") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ModelConfig::preset(name).and_then(|c| evaluation::count_params(&c)) {
            Ok(r) => {
                *out = r.param_count as u64;
                SrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Clipped scale-invariant SNR in dB (clip 30 dB).
///
/// # Safety
/// `reference` and `estimate` must point to `n` floats, `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn sr_si_snr(reference: *const f32, estimate: *const f32, n: usize, out: *mut f64) -> SrStatus {
    guard(|| {
        if reference.is_null() || estimate.is_null() || out.is_null() {
            return fail(SrStatus::NullPointer, "argument is null");
        }
        let r: Vec<f64> = slice::from_raw_parts(reference, n).iter().map(|&v| v as f64).collect();
        let e: Vec<f64> = slice::from_raw_parts(estimate, n).iter().map(|&v| v as f64).collect();
        let loss = objectives::LossConfig::default();
        match objectives::si_snr(&r, &e, loss.tau, loss.eps) {
            Ok(v) => {
                *out = v;
                SrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
