//! C interface: load a checkpoint, run inference, score rationales.
//!
//! Every fallible function returns an [`RlStatus`]; on failure the message is
//! available from [`rl_last_error`] on the same thread. Handles are opaque and
//! must be released with [`rl_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rationale_lab::checkpoint;
use rationale_lab::data::Vocab;
use rationale_lab::eval::token_prf;
use rationale_lab::model::Model;
use rationale_lab::tensor::{BinaryMask, ParamStore};
use rationale_lab::yofo::RationaleResult;
use rationale_lab::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Data = 5,
    Contract = 6,
    Numeric = 7,
    Panic = 8,
}

/// A loaded model with its vocabulary.
pub struct RlModel {
    model: Model,
    store: ParamStore<f64>,
    vocab: Vocab,
    max_len: usize,
}

/// Token-level precision, recall and F1.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RlPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RlStatus {
    match e {
        Error::Io { .. } => RlStatus::Io,
        Error::Checkpoint(_) => RlStatus::Checkpoint,
        Error::Data(_) | Error::Parse { .. } | Error::VocabMismatch(_) => RlStatus::Data,
        Error::Parameter(_) | Error::Config(_) => RlStatus::InvalidArgument,
        Error::Contract(_) => RlStatus::Contract,
        Error::NonFinite { .. } | Error::DegenerateMask(_) | Error::Dimension { .. } => {
            RlStatus::Numeric
        }
    }
}

fn guard(f: impl FnOnce() -> Result<(), (RlStatus, String)>) -> RlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RlStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RlStatus::Panic
        }
    }
}

fn lib(e: Error) -> (RlStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (RlStatus, String) {
    (RlStatus::NullArgument, format!("`{name}` is null"))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` receives a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rl_model_load(path: *const c_char, out: *mut *mut RlModel) -> RlStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (RlStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ck = checkpoint::load::<f64>(Path::new(path)).map_err(lib)?;
        let model = ck.model().map_err(lib)?;
        let vocab = ck.vocab().map_err(lib)?;
        let handle = RlModel {
            model,
            max_len: ck.header.spec.model.max_len,
            store: ck.store,
            vocab,
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`rl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rl_model_free(model: *mut RlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of encoder layers.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rl_model_num_layers(model: *const RlModel, out: *mut usize) -> RlStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.layers();
        Ok(())
    })
}

/// Longest accepted text, in tokens.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rl_model_max_tokens(model: *const RlModel, out: *mut usize) -> RlStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.max_len - 1;
        Ok(())
    })
}

/// Vocabulary id of `token`; `[UNK]`'s id when the token is unknown.
///
/// # Safety
/// `token` must be NUL-terminated; pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rl_model_token_id(
    model: *const RlModel,
    token: *const c_char,
    out: *mut usize,
) -> RlStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if token.is_null() {
            return Err(null("token"));
        }
        let t = CStr::from_ptr(token)
            .to_str()
            .map_err(|_| (RlStatus::InvalidArgument, "token is not UTF-8".to_string()))?;
        *out.as_mut().ok_or_else(|| null("out"))? =
            m.vocab.id(t).unwrap_or(rationale_lab::encoder::UNK_ID);
        Ok(())
    })
}

unsafe fn infer_raw(
    m: &RlModel,
    tokens: *const usize,
    len: usize,
) -> Result<RationaleResult, (RlStatus, String)> {
    if tokens.is_null() && len > 0 {
        return Err(null("tokens"));
    }
    let ids: &[usize] = if len == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(tokens, len)
    };
    if len + 1 > m.max_len {
        return Err((
            RlStatus::InvalidArgument,
            format!("{len} tokens exceed the model limit of {}", m.max_len - 1),
        ));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= m.vocab.len()) {
        return Err((
            RlStatus::InvalidArgument,
            format!("token id {bad} outside the vocabulary"),
        ));
    }
    m.model.infer(&m.store, ids).map_err(lib)
}

/// Predicts the label of `tokens[0..len]` and its rationale.
///
/// `prediction` receives 0 or 1. `logits` (2 entries) and `rationale`
/// (`len` bytes, 1 = selected) are optional.
///
/// # Safety
/// Non-null pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn rl_model_infer(
    model: *const RlModel,
    tokens: *const usize,
    len: usize,
    prediction: *mut usize,
    logits: *mut f64,
    rationale: *mut u8,
) -> RlStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let r = infer_raw(m, tokens, len)?;
        *prediction.as_mut().ok_or_else(|| null("prediction"))? = r.prediction;
        if !logits.is_null() {
            std::slice::from_raw_parts_mut(logits, 2).copy_from_slice(&r.logits);
        }
        if !rationale.is_null() {
            let out = std::slice::from_raw_parts_mut(rationale, len);
            for (o, &b) in out.iter_mut().zip(&r.rationale.0) {
                *o = u8::from(b);
            }
        }
        Ok(())
    })
}

/// Writes each layer's kept text tokens as a `layers x len` row-major byte
/// matrix.
///
/// # Safety
/// `out` must hold `layers * len` bytes, `layers` from
/// [`rl_model_num_layers`].
#[no_mangle]
pub unsafe extern "C" fn rl_model_layer_masks(
    model: *const RlModel,
    tokens: *const usize,
    len: usize,
    out: *mut u8,
) -> RlStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let r = infer_raw(m, tokens, len)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let layers = m.model.layers();
        let out = std::slice::from_raw_parts_mut(out, layers * len);
        for layer in 0..layers {
            let mask = r.layer_mask(layer + 1, len);
            for (o, &b) in out[layer * len..(layer + 1) * len].iter_mut().zip(&mask.0) {
                *o = u8::from(b);
            }
        }
        Ok(())
    })
}

/// Token-level precision, recall and F1 of `pred` against `gold`, both
/// `len` bytes where nonzero means selected.
///
/// # Safety
/// `pred` and `gold` must hold `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rl_token_prf(
    pred: *const u8,
    gold: *const u8,
    len: usize,
    out: *mut RlPrf,
) -> RlStatus {
    guard(|| {
        if len > 0 && (pred.is_null() || gold.is_null()) {
            return Err(null("pred/gold"));
        }
        let mask = |p: *const u8| {
            if len == 0 {
                BinaryMask(Vec::new())
            } else {
                BinaryMask(
                    std::slice::from_raw_parts(p, len)
                        .iter()
                        .map(|&b| b != 0)
                        .collect(),
                )
            }
        };
        let r = token_prf(&mask(pred), &mask(gold)).map_err(lib)?;
        *out.as_mut().ok_or_else(|| null("out"))? = RlPrf {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        };
        Ok(())
    })
}
