//! C ABI over [`lemore`].
//!
//! Every fallible function returns an [`LmStatus`]. On failure the message
//! is kept per thread and read back with [`lm_last_error_message`]. Models
//! are opaque [`LmModel`] handles owned by the caller and released with
//! [`lm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use lemore::model::{LeMoReModel, ModelConfig};
use lemore::tensor::Tensor;
use lemore::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmStatus {
    Ok = 0,
    InvalidArgument = 1,
    Shape = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Weights = 6,
    NullPointer = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct LmModel {
    inner: LeMoReModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(err: &Error) -> LmStatus {
    match err {
        Error::InvalidArgument(_) | Error::Handle(_) => LmStatus::InvalidArgument,
        Error::Shape(_) => LmStatus::Shape,
        Error::Config { .. } => LmStatus::Config,
        Error::Parse { .. } | Error::Json(_) => LmStatus::Parse,
        Error::Weights(_) => LmStatus::Weights,
        Error::Io(_) => LmStatus::Io,
    }
}

struct Failure(LmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LmStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> LmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            LmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LmStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(m: *const LmModel) -> Result<&'a LmModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            LmStatus::InvalidArgument,
            format!("`{what}` is not valid UTF-8"),
        )
    })
}

unsafe fn emit(
    out: *mut *mut LmModel,
    build: impl FnOnce() -> lemore::Result<LeMoReModel>,
) -> LmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let inner = build()?;
        *out = Box::into_raw(Box::new(LmModel { inner }));
        Ok(())
    })
}

/// Builds the default topology.
///
/// # Safety
/// `out` must be null or point to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn lm_model_new_default(out: *mut *mut LmModel) -> LmStatus {
    emit(out, || LeMoReModel::build(&ModelConfig::default()))
}

/// Builds the small toy topology.
///
/// # Safety
/// Same contract as [`lm_model_new_default`].
#[no_mangle]
pub unsafe extern "C" fn lm_model_new_toy(out: *mut *mut LmModel) -> LmStatus {
    emit(out, || LeMoReModel::build(&ModelConfig::toy()))
}

/// Builds a model from a JSON configuration document.
///
/// # Safety
/// `json` must be null or a NUL-terminated string; `out` as in
/// [`lm_model_new_default`].
#[no_mangle]
pub unsafe extern "C" fn lm_model_from_config_json(
    json: *const c_char,
    out: *mut *mut LmModel,
) -> LmStatus {
    let text = match str_arg(json, "json") {
        Ok(t) => t,
        Err(Failure(s, m)) => {
            set_error(m);
            return s;
        }
    };
    emit(out, || {
        ModelConfig::from_json(text).and_then(|c| LeMoReModel::build(&c))
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lm_model_free(model: *mut LmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_model_param_count(model: *const LmModel, out: *mut u64) -> LmStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.inner.parameter_count() as u64;
        Ok(())
    })
}

/// Input height, width and class count of the model.
///
/// # Safety
/// `model` must be a live handle; the three outputs writable.
#[no_mangle]
pub unsafe extern "C" fn lm_model_geometry(
    model: *const LmModel,
    height: *mut usize,
    width: *mut usize,
    num_classes: *mut usize,
) -> LmStatus {
    guard(|| {
        let c = model_ref(model)?.inner.config();
        *height.as_mut().ok_or_else(|| null("height"))? = c.input_size.0;
        *width.as_mut().ok_or_else(|| null("width"))? = c.input_size.1;
        *num_classes.as_mut().ok_or_else(|| null("num_classes"))? = c.num_classes;
        Ok(())
    })
}

/// Parameter count and FLOPs (2 per multiply-accumulate) at `height×width`.
///
/// # Safety
/// `model` must be a live handle; `params` and `flops` writable.
#[no_mangle]
pub unsafe extern "C" fn lm_model_analyze(
    model: *const LmModel,
    height: usize,
    width: usize,
    params: *mut u64,
    flops: *mut u64,
) -> LmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let params = params.as_mut().ok_or_else(|| null("params"))?;
        let flops = flops.as_mut().ok_or_else(|| null("flops"))?;
        let report = lemore::analysis::count_costs(&m.inner, (height, width))?;
        *params = report.totals.params as u64;
        *flops = report.totals.flops;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lm_model_load_weights(
    model: *mut LmModel,
    path: *const c_char,
) -> LmStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        lemore::io::load_weights(&mut m.inner, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lm_model_save_weights(
    model: *const LmModel,
    path: *const c_char,
) -> LmStatus {
    guard(|| {
        lemore::io::save_weights(&model_ref(model)?.inner, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Per-pixel class ids for a `3×H×W` planar image at the model's input
/// size. `image_len` must be `3·H·W` and `labels_len` must be `H·W`.
///
/// # Safety
/// `image` must point to `image_len` readable doubles and `labels` to
/// `labels_len` writable integers.
#[no_mangle]
pub unsafe extern "C" fn lm_model_infer(
    model: *const LmModel,
    image: *const f64,
    image_len: usize,
    labels: *mut u32,
    labels_len: usize,
) -> LmStatus {
    guard(|| {
        let m = model_ref(model)?;
        if image.is_null() {
            return Err(null("image"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let (h, w) = m.inner.config().input_size;
        if image_len != 3 * h * w || labels_len != h * w {
            return Err(Failure(
                LmStatus::Shape,
                format!("expected {} image values and {} labels for {h}x{w}, got {image_len} and {labels_len}", 3 * h * w, h * w),
            ));
        }
        let data = std::slice::from_raw_parts(image, image_len).to_vec();
        let pred = m.inner.predict(&Tensor::from_vec(&[3, h, w], data)?)?;
        std::slice::from_raw_parts_mut(labels, labels_len).copy_from_slice(&pred);
        Ok(())
    })
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn lm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code; "unknown" for values outside [`LmStatus`].
#[no_mangle]
pub extern "C" fn lm_status_name(status: c_int) -> *const c_char {
    let s: &'static [u8] = match status {
        0 => b"ok\0",
        1 => b"invalid argument\0",
        2 => b"shape\0",
        3 => b"config\0",
        4 => b"io\0",
        5 => b"parse\0",
        6 => b"weights\0",
        7 => b"null pointer\0",
        8 => b"panic\0",
        _ => b"unknown\0",
    };
    s.as_ptr().cast()
}
