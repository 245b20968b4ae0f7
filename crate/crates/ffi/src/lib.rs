//! C ABI for the qerl codecs, noise schedules and group advantages.
//!
//! Every fallible function returns an `int32_t` status (`QERL_OK` or a
//! negative `QERL_ERR_*`). On failure the message is kept per thread and
//! read with [`qerl_last_error`]. Quantized tensors are opaque
//! [`QerlTensor`] handles owned by the caller and released with
//! [`qerl_tensor_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ndarray::ArrayView2;
use qerl::aqn::{DecayKind, NoiseSchedule};
use qerl::quant::{e2m1, error_report, quantize, FormatKind, QuantError, QuantizedTensor};

pub const QERL_OK: i32 = 0;
/// A required pointer was NULL.
pub const QERL_ERR_NULL: i32 = -1;
/// A scalar argument was out of range (unknown format id, zero dims, …).
pub const QERL_ERR_INVALID_ARG: i32 = -2;
/// The codec rejected the input (e.g. a non-finite weight).
pub const QERL_ERR_QUANT: i32 = -3;
/// A serialized container failed to parse.
pub const QERL_ERR_CORRUPT: i32 = -4;
/// The output buffer is too small; the needed size was written back.
pub const QERL_ERR_BUFFER_TOO_SMALL: i32 = -5;
/// A Rust panic was caught at the boundary.
pub const QERL_ERR_PANIC: i32 = -99;

pub const QERL_FORMAT_INT4: i32 = 0;
pub const QERL_FORMAT_FP4: i32 = 1;
pub const QERL_FORMAT_NVFP4: i32 = 2;
pub const QERL_FORMAT_MXFP4: i32 = 3;
pub const QERL_FORMAT_NF4: i32 = 4;

pub const QERL_DECAY_EXPONENTIAL: i32 = 0;
pub const QERL_DECAY_LINEAR: i32 = 1;
pub const QERL_DECAY_COSINE: i32 = 2;
pub const QERL_DECAY_LOGARITHMIC: i32 = 3;

/// A quantized matrix.
pub struct QerlTensor {
    inner: QuantizedTensor,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn fail(code: i32, msg: impl Into<String>) -> i32 {
    set_error(msg);
    code
}

fn quant_fail(e: QuantError) -> i32 {
    let code = match e {
        QuantError::Corrupt(_) => QERL_ERR_CORRUPT,
        QuantError::UnknownFormat(_) | QuantError::InvalidBits(_) | QuantError::ShapeMismatch { .. } => {
            QERL_ERR_INVALID_ARG
        }
        _ => QERL_ERR_QUANT,
    };
    fail(code, e.to_string())
}

/// Runs `f`, turning a panic into `QERL_ERR_PANIC`.
fn guard(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => {
            if code == QERL_OK {
                set_error("");
            }
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(QERL_ERR_PANIC, format!("panic: {msg}"))
        }
    }
}

fn format_of(id: i32) -> Option<FormatKind> {
    u8::try_from(id).ok().and_then(FormatKind::from_tag)
}

fn decay_of(id: i32) -> Option<DecayKind> {
    match id {
        QERL_DECAY_EXPONENTIAL => Some(DecayKind::Exponential),
        QERL_DECAY_LINEAR => Some(DecayKind::Linear),
        QERL_DECAY_COSINE => Some(DecayKind::Cosine),
        QERL_DECAY_LOGARITHMIC => Some(DecayKind::Logarithmic),
        _ => None,
    }
}

/// # Safety
/// `data` must point to `rows * cols` readable doubles.
unsafe fn matrix<'a>(data: *const f64, rows: usize, cols: usize) -> Result<ArrayView2<'a, f64>, i32> {
    if data.is_null() {
        return Err(fail(QERL_ERR_NULL, "data is NULL"));
    }
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n > 0)
        .ok_or_else(|| fail(QERL_ERR_INVALID_ARG, format!("bad shape {rows}x{cols}")))?;
    let s = std::slice::from_raw_parts(data, n);
    Ok(ArrayView2::from_shape((rows, cols), s).expect("length matches shape"))
}

/// Message of the last failed call on this thread, or "" after a success.
/// The pointer stays valid until the next qerl call on the same thread.
#[no_mangle]
pub extern "C" fn qerl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qerl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Quantizes a row-major `rows x cols` matrix. On success `*out` owns a new
/// handle.
///
/// # Safety
/// `data` must point to `rows * cols` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qerl_quantize(
    data: *const f64,
    rows: usize,
    cols: usize,
    format: i32,
    out: *mut *mut QerlTensor,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(QERL_ERR_NULL, "out is NULL");
        }
        *out = ptr::null_mut();
        let Some(kind) = format_of(format) else {
            return fail(QERL_ERR_INVALID_ARG, format!("unknown format id {format}"));
        };
        let w = match matrix(data, rows, cols) {
            Ok(w) => w,
            Err(code) => return code,
        };
        match quantize(w, kind) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(QerlTensor { inner: t }));
                QERL_OK
            }
            Err(e) => quant_fail(e),
        }
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `t` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn qerl_tensor_free(t: *mut QerlTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Shape and format id of a handle. Any output pointer may be NULL.
///
/// # Safety
/// `t` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn qerl_tensor_dims(
    t: *const QerlTensor,
    rows: *mut usize,
    cols: *mut usize,
    format: *mut i32,
) -> i32 {
    guard(|| {
        let Some(t) = t.as_ref() else {
            return fail(QERL_ERR_NULL, "tensor is NULL");
        };
        if !rows.is_null() {
            *rows = t.inner.rows;
        }
        if !cols.is_null() {
            *cols = t.inner.cols;
        }
        if !format.is_null() {
            *format = t.inner.spec.kind.tag() as i32;
        }
        QERL_OK
    })
}

/// Writes the reconstructed matrix, row-major, into `out[0..len]`;
/// `len` must be at least rows * cols.
///
/// # Safety
/// `t` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn qerl_dequantize(t: *const QerlTensor, out: *mut f64, len: usize) -> i32 {
    guard(|| {
        let Some(t) = t.as_ref() else {
            return fail(QERL_ERR_NULL, "tensor is NULL");
        };
        if out.is_null() {
            return fail(QERL_ERR_NULL, "out is NULL");
        }
        let n = t.inner.rows * t.inner.cols;
        if len < n {
            return fail(QERL_ERR_BUFFER_TOO_SMALL, format!("need {n} doubles, got {len}"));
        }
        let d = t.inner.dequantize();
        let dst = std::slice::from_raw_parts_mut(out, n);
        for (o, v) in dst.iter_mut().zip(d.iter()) {
            *o = *v;
        }
        QERL_OK
    })
}

/// Serializes to the QERL container. `*written` always receives the full
/// size; call with `buf = NULL` to query it. Returns
/// `QERL_ERR_BUFFER_TOO_SMALL` when `cap` is short.
///
/// # Safety
/// `t` must be a live handle, `written` writable, and `buf` (if not NULL)
/// must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn qerl_tensor_serialize(
    t: *const QerlTensor,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> i32 {
    guard(|| {
        let Some(t) = t.as_ref() else {
            return fail(QERL_ERR_NULL, "tensor is NULL");
        };
        if written.is_null() {
            return fail(QERL_ERR_NULL, "written is NULL");
        }
        let bytes = t.inner.to_bytes();
        *written = bytes.len();
        if buf.is_null() || cap < bytes.len() {
            return fail(QERL_ERR_BUFFER_TOO_SMALL, format!("need {} bytes, got {cap}", bytes.len()));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        QERL_OK
    })
}

/// Parses a QERL container into a new handle.
///
/// # Safety
/// `buf` must hold `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qerl_tensor_deserialize(buf: *const u8, len: usize, out: *mut *mut QerlTensor) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(QERL_ERR_NULL, "out is NULL");
        }
        *out = ptr::null_mut();
        if buf.is_null() {
            return fail(QERL_ERR_NULL, "buf is NULL");
        }
        match QuantizedTensor::from_bytes(std::slice::from_raw_parts(buf, len)) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(QerlTensor { inner: t }));
                QERL_OK
            }
            Err(e) => quant_fail(e),
        }
    })
}

/// Mean squared and max absolute reconstruction error of quantizing `data`.
///
/// # Safety
/// `data` must point to `rows * cols` doubles; `mse` and `max_abs` writable.
#[no_mangle]
pub unsafe extern "C" fn qerl_error_report(
    data: *const f64,
    rows: usize,
    cols: usize,
    format: i32,
    mse: *mut f64,
    max_abs: *mut f64,
) -> i32 {
    guard(|| {
        if mse.is_null() || max_abs.is_null() {
            return fail(QERL_ERR_NULL, "mse/max_abs is NULL");
        }
        let Some(kind) = format_of(format) else {
            return fail(QERL_ERR_INVALID_ARG, format!("unknown format id {format}"));
        };
        let w = match matrix(data, rows, cols) {
            Ok(w) => w,
            Err(code) => return code,
        };
        match error_report(w, kind) {
            Ok(r) => {
                *mse = r.mse;
                *max_abs = r.max_abs;
                QERL_OK
            }
            Err(e) => quant_fail(e),
        }
    })
}

/// Nearest E2M1 code (ties to even, saturating at ±6). NaN maps to +0.
#[no_mangle]
pub extern "C" fn qerl_e2m1_encode(x: f64) -> u8 {
    if x.is_nan() {
        return 0;
    }
    e2m1::encode(x)
}

/// Value of an E2M1 code; only the low nibble is read.
#[no_mangle]
pub extern "C" fn qerl_e2m1_decode(code: u8) -> f64 {
    e2m1::decode(code & 0x0f)
}

/// Noise std of stage `k` (1-based) of a `stages`-stage schedule.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qerl_sigma_at_stage(
    sigma_start: f64,
    sigma_end: f64,
    stages: usize,
    decay: i32,
    k: usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(QERL_ERR_NULL, "out is NULL");
        }
        let Some(kind) = decay_of(decay) else {
            return fail(QERL_ERR_INVALID_ARG, format!("unknown decay id {decay}"));
        };
        let s = NoiseSchedule::new(sigma_start, sigma_end, stages, kind).and_then(|s| s.sigma_at_stage(k));
        match s {
            Ok(v) => {
                *out = v;
                QERL_OK
            }
            Err(e) => fail(QERL_ERR_INVALID_ARG, e.to_string()),
        }
    })
}

/// Group-normalized advantages of `n` rewards into `out[0..n]`.
///
/// # Safety
/// `rewards` and `out` must each hold `n` doubles (they may alias).
#[no_mangle]
pub unsafe extern "C" fn qerl_group_advantages(rewards: *const f64, n: usize, eps: f64, out: *mut f64) -> i32 {
    guard(|| {
        if rewards.is_null() || out.is_null() {
            return fail(QERL_ERR_NULL, "rewards/out is NULL");
        }
        let r = std::slice::from_raw_parts(rewards, n).to_vec();
        if let Some(i) = r.iter().position(|v| !v.is_finite()) {
            return fail(QERL_ERR_INVALID_ARG, format!("reward {i} is not finite"));
        }
        let a = qerl::rl::group_advantages(&r, eps);
        ptr::copy_nonoverlapping(a.as_ptr(), out, n);
        QERL_OK
    })
}
