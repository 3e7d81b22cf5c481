//! C ABI over `mext`: load a checkpoint, run every exit or the early-exit
//! policy on one token sequence, and the entropy / gradient-projection
//! helpers.
//!
//! Every fallible function returns a [`MextStatus`]; on failure the message
//! is available from [`mext_last_error`] on the same thread until the next
//! call. Panics are caught at the boundary and reported as
//! `MEXT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mext::gradreg::{regularize, GradVector, Layout};
use mext::model::{eval_all_exits, ParamStore, TokenBatch};
use mext::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MextStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Contract = 3,
    Config = 4,
    Data = 5,
    Checkpoint = 6,
    Io = 7,
    /// An output buffer is smaller than the result.
    BufferTooSmall = 8,
    Panic = 9,
}

/// A loaded model; create with [`mext_model_load`], release with
/// [`mext_model_free`].
pub struct MextModel {
    store: ParamStore<f32>,
}

/// Outcome of early-exit inference on one sequence.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MextExitDecision {
    /// 1-based layer the example left at.
    pub exit_layer: u32,
    pub prediction: u32,
    /// Entropy in nats of the exiting prediction.
    pub entropy: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MextStatus {
    match e {
        Error::Dimension(_) => MextStatus::Dimension,
        Error::Contract(_) => MextStatus::Contract,
        Error::Config(_) => MextStatus::Config,
        Error::Data(_) => MextStatus::Data,
        Error::Checkpoint(_) => MextStatus::Checkpoint,
        Error::Io { .. } => MextStatus::Io,
    }
}

struct Failure(MextStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MextStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MextStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside mext".into());
            MextStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MextStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next `mext_*` call on the same thread.
#[no_mangle]
pub extern "C" fn mext_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mext_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a MEXT1 checkpoint from `path` (UTF-8) into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mext_model_load(path: *const c_char, out: *mut *mut MextModel) -> MextStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(MextStatus::Config, "path is not UTF-8".into()))?;
        let (store, _) = mext::checkpoint::load::<f32>(Path::new(path))?;
        *out = Box::into_raw(Box::new(MextModel { store }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`mext_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mext_model_free(model: *mut MextModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of transformer layers (and exits); 0 for null.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn mext_model_layers(model: *const MextModel) -> usize {
    model.as_ref().map_or(0, |m| m.store.config().layers)
}

/// Number of classes; 0 for null.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn mext_model_classes(model: *const MextModel) -> usize {
    model.as_ref().map_or(0, |m| m.store.config().classes)
}

/// Logits of every exit for one sequence, written row-major as
/// `layers × classes` floats into `out` (capacity `out_len`).
///
/// # Safety
/// `ids` must point at `len` token ids and `out` at `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mext_forward_all_exits(
    model: *const MextModel,
    ids: *const u32,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> MextStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ids = slice(ids, len, "ids")?;
        let out = slice_mut(out, out_len, "out")?;
        let need = m.store.config().layers * m.store.config().classes;
        if out.len() < need {
            return Err(Failure(
                MextStatus::BufferTooSmall,
                format!("need {need} floats, got {}", out.len()),
            ));
        }
        let tokens = TokenBatch::from_sequences(&[ids.to_vec()])?;
        let exits = eval_all_exits(&m.store, &tokens)?;
        for (dst, logits) in out.chunks_mut(m.store.config().classes).zip(&exits) {
            dst.copy_from_slice(logits.data());
        }
        Ok(())
    })
}

/// Early-exit inference at entropy threshold `threshold` (nats).
///
/// # Safety
/// `ids` must point at `len` token ids and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mext_infer_adaptive(
    model: *const MextModel,
    ids: *const u32,
    len: usize,
    threshold: f64,
    out: *mut MextExitDecision,
) -> MextStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ids = slice(ids, len, "ids")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = mext::inference::infer_adaptive(&m.store, ids, threshold)?;
        *out = MextExitDecision {
            exit_layer: d.exit_layer as u32,
            prediction: d.prediction as u32,
            entropy: d.entropy_at_exit,
        };
        Ok(())
    })
}

/// Entropy in nats of the distribution `probs[0..n]`.
///
/// # Safety
/// `probs` must point at `n` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mext_entropy(probs: *const f64, n: usize, out: *mut f64) -> MextStatus {
    guard(|| {
        let probs = slice(probs, n, "probs")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = mext::inference::entropy(probs)?;
        Ok(())
    })
}

/// Gradient regularization of two flat gradients of length `n`: writes
/// `g*` into `g_star` and 1 into `*conflicted` when `g_f · g_s < 0`.
///
/// # Safety
/// `g_f`, `g_s` and `g_star` must point at `n` doubles; `conflicted` must be
/// valid or null.
#[no_mangle]
pub unsafe extern "C" fn mext_regularize(
    g_f: *const f64,
    g_s: *const f64,
    n: usize,
    g_star: *mut f64,
    conflicted: *mut i32,
) -> MextStatus {
    guard(|| {
        let layout = Layout::flat(n);
        let f = GradVector::from_values(layout.clone(), slice(g_f, n, "g_f")?.to_vec())?;
        let s = GradVector::from_values(layout, slice(g_s, n, "g_s")?.to_vec())?;
        let out = slice_mut(g_star, n, "g_star")?;
        let r = regularize(&f, &s)?;
        out.copy_from_slice(r.g_star.values());
        if let Some(c) = conflicted.as_mut() {
            *c = r.conflicted as i32;
        }
        Ok(())
    })
}
