//! C interface to NAKUL checkpoints: load, query the input shape, predict.
//!
//! Every fallible call returns a [`NakulStatus`]. On failure a message is
//! kept per thread and can be read with [`nakul_last_error`]. Panics never
//! cross the boundary; they surface as `NAKUL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nakul::{Error, ParamStore, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NakulStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Panic = 6,
}

/// A loaded model. Opaque to C.
pub struct NakulModel {
    model: nakul::model::NakulModel,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (NakulStatus, String);

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NakulStatus {
    match e {
        Error::Io { .. } => NakulStatus::Io,
        Error::Format { .. } => NakulStatus::Format,
        Error::Shape(_) => NakulStatus::Shape,
        _ => NakulStatus::InvalidArgument,
    }
}

fn lift(e: Error) -> Failure {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> Failure {
    (NakulStatus::NullPointer, format!("`{what}` is NULL"))
}

/// Runs `f`, recording its error message and trapping panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NakulStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NakulStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            NakulStatus::Panic
        }
    }
}

/// Loads a checkpoint. On success `*out` owns a model that must be released
/// with [`nakul_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn nakul_model_load(path: *const c_char, out: *mut *mut NakulModel) -> NakulStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (NakulStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let (model, store) = nakul::checkpoint::load(Path::new(path)).map_err(lift)?;
        *out = Box::into_raw(Box::new(NakulModel { model, store }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`nakul_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nakul_model_free(model: *mut NakulModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input shape and class count of a model. Any output pointer may be NULL.
///
/// # Safety
/// `model` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn nakul_model_dims(
    model: *const NakulModel,
    channels: *mut usize,
    samples: *mut usize,
    classes: *mut usize,
) -> NakulStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = &m.model.cfg;
        for (ptr, v) in [(channels, c.channels), (samples, c.length), (classes, c.classes)] {
            if let Some(p) = ptr.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Sampling rate (Hz) the model was configured for.
///
/// # Safety
/// `model` must be a live handle and `rate` writable.
#[no_mangle]
pub unsafe extern "C" fn nakul_model_rate(model: *const NakulModel, rate: *mut f64) -> NakulStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let r = rate.as_mut().ok_or_else(|| null("rate"))?;
        *r = m.model.cfg.rate;
        Ok(())
    })
}

/// Evaluation-mode logits for `batch` trials.
///
/// `input` holds `batch × channels × samples` values, row-major;
/// `logits` receives `batch × classes` values. Both lengths are checked.
///
/// # Safety
/// `input` must point to `input_len` readable doubles and `logits` to
/// `logits_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn nakul_model_predict(
    model: *const NakulModel,
    input: *const f64,
    batch: usize,
    input_len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> NakulStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let c = &m.model.cfg;
        if batch == 0 {
            return Err((NakulStatus::InvalidArgument, "batch must be positive".into()));
        }
        let want_in = batch * c.channels * c.length;
        if input_len != want_in {
            return Err((
                NakulStatus::Shape,
                format!("input has {input_len} values, expected {batch}×{}×{} = {want_in}", c.channels, c.length),
            ));
        }
        let want_out = batch * c.classes;
        if logits_len != want_out {
            return Err((
                NakulStatus::Shape,
                format!("logits buffer has {logits_len} slots, expected {want_out}"),
            ));
        }
        let data = std::slice::from_raw_parts(input, input_len).to_vec();
        let x = Tensor::new([batch, c.channels, c.length], data).map_err(lift)?;
        let y = m.model.predict(&m.store, &x).map_err(lift)?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn nakul_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nakul_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
