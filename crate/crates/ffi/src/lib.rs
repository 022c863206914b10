//! C ABI over `efpn-core`.
//!
//! Models are opaque handles created by `efpn_model_build_default`,
//! `efpn_model_build_json` or `efpn_model_load` and released with
//! `efpn_model_free`. Every fallible call returns an [`EfpnStatus`]; on
//! failure `efpn_last_error_message` describes the error on the calling
//! thread. No function unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use efpn_core::data::{image_to_tensor, load_checkpoint, save_checkpoint};
use efpn_core::error::ErrorClass;
use efpn_core::{EfpnConfig, EfpnModel, Error};
use image::RgbImage;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EfpnStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string was not UTF-8, a size was zero, or an output buffer was too small.
    InvalidArgument = 2,
    /// Invalid configuration or incorrect use of the API.
    Config = 3,
    /// Unreadable, corrupt or mis-shaped input.
    Data = 4,
    /// Non-finite values during computation.
    Numeric = 5,
    /// An internal panic was caught at the boundary.
    Panic = 6,
}

/// Opaque model handle.
pub struct EfpnModelHandle {
    model: EfpnModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: EfpnStatus, msg: impl Into<String>) -> EfpnStatus {
    set_error(msg.into());
    status
}

fn from_core(err: Error) -> EfpnStatus {
    let status = match err.class() {
        ErrorClass::Config => EfpnStatus::Config,
        ErrorClass::Data => EfpnStatus::Data,
        ErrorClass::Numeric => EfpnStatus::Numeric,
    };
    fail(status, err.to_string())
}

/// Runs `f`, turning panics into [`EfpnStatus::Panic`].
fn guard(f: impl FnOnce() -> EfpnStatus) -> EfpnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(EfpnStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, EfpnStatus> {
    if p.is_null() {
        return Err(fail(EfpnStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EfpnStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn model_arg<'a>(p: *const EfpnModelHandle) -> Result<&'a EfpnModel, EfpnStatus> {
    p.as_ref()
        .map(|h| &h.model)
        .ok_or_else(|| fail(EfpnStatus::NullPointer, "model handle is null"))
}

unsafe fn emit(out: *mut *mut EfpnModelHandle, model: EfpnModel) -> EfpnStatus {
    *out = Box::into_raw(Box::new(EfpnModelHandle { model }));
    EfpnStatus::Ok
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! try_core {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(err) => return from_core(err),
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn efpn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or null if the last
/// call succeeded. Valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn efpn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds the default configuration with weights drawn from `seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn efpn_model_build_default(seed: u64, out: *mut *mut EfpnModelHandle) -> EfpnStatus {
    guard(|| {
        if out.is_null() {
            return fail(EfpnStatus::NullPointer, "out is null");
        }
        emit(out, try_core!(EfpnModel::build(EfpnConfig::default(), seed)))
    })
}

/// Builds a model from the JSON form of a model configuration.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` as for
/// [`efpn_model_build_default`].
#[no_mangle]
pub unsafe extern "C" fn efpn_model_build_json(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut EfpnModelHandle,
) -> EfpnStatus {
    guard(|| {
        let text = try_ffi!(str_arg(config_json, "config_json"));
        if out.is_null() {
            return fail(EfpnStatus::NullPointer, "out is null");
        }
        let cfg: EfpnConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return fail(EfpnStatus::Config, format!("model config JSON: {e}")),
        };
        emit(out, try_core!(EfpnModel::build(cfg, seed)))
    })
}

/// Loads a checkpoint written by `efpn_model_save` or the `efpn` tool.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as for
/// [`efpn_model_build_default`].
#[no_mangle]
pub unsafe extern "C" fn efpn_model_load(path: *const c_char, out: *mut *mut EfpnModelHandle) -> EfpnStatus {
    guard(|| {
        let path = try_ffi!(str_arg(path, "path"));
        if out.is_null() {
            return fail(EfpnStatus::NullPointer, "out is null");
        }
        emit(out, try_core!(load_checkpoint(Path::new(path))))
    })
}

/// Writes the model to `path` as a checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn efpn_model_save(model: *const EfpnModelHandle, path: *const c_char) -> EfpnStatus {
    guard(|| {
        let model = try_ffi!(model_arg(model));
        let path = try_ffi!(str_arg(path, "path"));
        try_core!(save_checkpoint(model, Path::new(path)));
        EfpnStatus::Ok
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn efpn_model_free(model: *mut EfpnModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn efpn_model_param_count(model: *const EfpnModelHandle, out: *mut u64) -> EfpnStatus {
    guard(|| {
        let model = try_ffi!(model_arg(model));
        if out.is_null() {
            return fail(EfpnStatus::NullPointer, "out is null");
        }
        *out = model.param_count();
        EfpnStatus::Ok
    })
}

/// Forward-pass FLOPs for a square input of side `input_size`.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn efpn_model_flop_count(
    model: *const EfpnModelHandle,
    input_size: usize,
    out: *mut u64,
) -> EfpnStatus {
    guard(|| {
        let model = try_ffi!(model_arg(model));
        if out.is_null() {
            return fail(EfpnStatus::NullPointer, "out is null");
        }
        let probe = EfpnConfig {
            input_size,
            ..model.config().clone()
        };
        try_core!(probe.validate());
        *out = model.flop_count(input_size);
        EfpnStatus::Ok
    })
}

/// Number of output classes, background included.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn efpn_model_num_classes(model: *const EfpnModelHandle, out: *mut usize) -> EfpnStatus {
    guard(|| {
        let model = try_ffi!(model_arg(model));
        if out.is_null() {
            return fail(EfpnStatus::NullPointer, "out is null");
        }
        *out = model.num_classes();
        EfpnStatus::Ok
    })
}

/// Segments one interleaved RGB8 image of `height` x `width` pixels.
/// Writes one class index per pixel, row-major, into `mask_out`, which must
/// hold `mask_len >= height * width` bytes.
///
/// # Safety
/// `model` must be a live handle; `rgb` must point to `height * width * 3`
/// readable bytes; `mask_out` to `mask_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn efpn_model_predict(
    model: *const EfpnModelHandle,
    rgb: *const u8,
    height: usize,
    width: usize,
    mask_out: *mut u8,
    mask_len: usize,
) -> EfpnStatus {
    guard(|| {
        let model = try_ffi!(model_arg(model));
        if rgb.is_null() || mask_out.is_null() {
            return fail(EfpnStatus::NullPointer, "rgb and mask_out must not be null");
        }
        let Some(pixels) = height.checked_mul(width).filter(|&p| p > 0) else {
            return fail(EfpnStatus::InvalidArgument, format!("invalid image size {height}x{width}"));
        };
        if mask_len < pixels {
            return fail(
                EfpnStatus::InvalidArgument,
                format!("mask buffer holds {mask_len} bytes but the image has {pixels} pixels"),
            );
        }
        let (Ok(w), Ok(h)) = (u32::try_from(width), u32::try_from(height)) else {
            return fail(EfpnStatus::InvalidArgument, "image dimensions exceed u32");
        };
        let bytes = std::slice::from_raw_parts(rgb, pixels * 3).to_vec();
        let img = RgbImage::from_raw(w, h, bytes).expect("buffer length matches dimensions");
        let mask = try_core!(model.predict(&image_to_tensor(&img))).remove(0);
        std::slice::from_raw_parts_mut(mask_out, pixels).copy_from_slice(mask.data());
        EfpnStatus::Ok
    })
}
