//! C ABI for the dialogue calibration workbench.
//!
//! Handles are opaque pointers created and destroyed by this library. Every
//! fallible function returns a [`CaldialStatus`]; on failure a description
//! is available from [`caldial_last_error`] until the next call on the same
//! thread. Strings returned through out-parameters are owned by the caller
//! and must be released with [`caldial_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use caldial::calibration::{ece, find_optimal_temperature, scale_probs, PredictionSet};
use caldial::corpus::{tokenize, Vocab};
use caldial::error::Error;
use caldial::metrics::{bleu1, meteor};
use caldial::model::{load_checkpoint, ModelParameters};
use caldial::train::decode_reply;

/// Result codes mirroring the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaldialStatus {
    Ok = 0,
    /// Invalid configuration or argument values.
    ConfigError = 1,
    /// Runtime or numeric failure.
    RuntimeError = 2,
    /// A required pointer argument was null.
    NullArgument = 3,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(err: Error) -> CaldialStatus {
    set_error(&err.to_string());
    match err {
        Error::Config(_) => CaldialStatus::ConfigError,
        _ => CaldialStatus::RuntimeError,
    }
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn caldial_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, CaldialStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(CaldialStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid utf-8");
        CaldialStatus::InvalidUtf8
    })
}

/// A loaded model with the vocabulary it was trained against.
pub struct CaldialModel {
    params: ModelParameters,
    vocab: Vocab,
}

/// Load a checkpoint plus its vocab file into an opaque handle.
///
/// # Safety
/// `checkpoint_path` and `vocab_path` must be valid NUL-terminated strings
/// and `out_model` a valid pointer; the handle must be released with
/// [`caldial_model_free`].
#[no_mangle]
pub unsafe extern "C" fn caldial_model_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out_model: *mut *mut CaldialModel,
) -> CaldialStatus {
    if out_model.is_null() {
        set_error("null out_model");
        return CaldialStatus::NullArgument;
    }
    let ckpt = match utf8_arg(checkpoint_path) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let vocab_file = match utf8_arg(vocab_path) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let params = match load_checkpoint(Path::new(ckpt)) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let vocab = match Vocab::read_from(Path::new(vocab_file)) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    if params.config.vocab_size != vocab.size() {
        set_error("checkpoint and vocab file disagree on vocabulary size");
        return CaldialStatus::ConfigError;
    }
    *out_model = Box::into_raw(Box::new(CaldialModel { params, vocab }));
    CaldialStatus::Ok
}

/// Release a handle from [`caldial_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must come from [`caldial_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn caldial_model_free(model: *mut CaldialModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of a loaded model.
///
/// # Safety
/// `model` must be a live handle from [`caldial_model_load`].
#[no_mangle]
pub unsafe extern "C" fn caldial_model_vocab_size(model: *const CaldialModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).vocab.size()
}

/// Greedy-decode a reply to `query`. The reply is written to `out_reply`
/// as a NUL-terminated string owned by the caller.
///
/// # Safety
/// `model` must be a live handle, `query` a valid NUL-terminated string,
/// and `out_reply` a valid pointer. Free the reply with
/// [`caldial_string_free`].
#[no_mangle]
pub unsafe extern "C" fn caldial_model_reply(
    model: *const CaldialModel,
    query: *const c_char,
    max_new_tokens: usize,
    out_reply: *mut *mut c_char,
) -> CaldialStatus {
    if model.is_null() || out_reply.is_null() {
        set_error("null model or out_reply");
        return CaldialStatus::NullArgument;
    }
    let query = match utf8_arg(query) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let model = &*model;
    match decode_reply(&model.params, query, &model.vocab, max_new_tokens) {
        Ok(tokens) => {
            let text = tokens.join(" ");
            match CString::new(text) {
                Ok(s) => {
                    *out_reply = s.into_raw();
                    CaldialStatus::Ok
                }
                Err(_) => {
                    set_error("reply contained an interior NUL");
                    CaldialStatus::RuntimeError
                }
            }
        }
        Err(e) => fail(e),
    }
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from a caldial function and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn caldial_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn prediction_set(
    logits: *const f64,
    n: usize,
    classes: usize,
    labels: *const usize,
) -> Result<PredictionSet, CaldialStatus> {
    if logits.is_null() || labels.is_null() {
        set_error("null logits or labels");
        return Err(CaldialStatus::NullArgument);
    }
    if n == 0 || classes == 0 {
        set_error("n and classes must be positive");
        return Err(CaldialStatus::ConfigError);
    }
    let values = std::slice::from_raw_parts(logits, n * classes).to_vec();
    let labels = std::slice::from_raw_parts(labels, n).to_vec();
    let matrix = caldial::autodiff::Mat::from_shape_vec((n, classes), values).map_err(|_| {
        set_error("logits buffer does not match n * classes");
        CaldialStatus::ConfigError
    })?;
    PredictionSet::new(matrix, labels).map_err(fail)
}

/// Expected calibration error of row-major `n x classes` logits against the
/// labels, at the given temperature and bin count.
///
/// # Safety
/// `logits` must hold `n * classes` doubles, `labels` `n` entries, and
/// `out_ece` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caldial_ece(
    logits: *const f64,
    n: usize,
    classes: usize,
    labels: *const usize,
    temperature: f64,
    n_bins: usize,
    out_ece: *mut f64,
) -> CaldialStatus {
    if out_ece.is_null() {
        set_error("null out_ece");
        return CaldialStatus::NullArgument;
    }
    let preds = match prediction_set(logits, n, classes, labels) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match ece(&preds, temperature, n_bins) {
        Ok((value, _)) => {
            *out_ece = value;
            CaldialStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// NLL-minimizing temperature for row-major `n x classes` logits.
///
/// # Safety
/// Buffer contracts as in [`caldial_ece`]; `out_t` must be valid.
#[no_mangle]
pub unsafe extern "C" fn caldial_optimal_temperature(
    logits: *const f64,
    n: usize,
    classes: usize,
    labels: *const usize,
    out_t: *mut f64,
) -> CaldialStatus {
    if out_t.is_null() {
        set_error("null out_t");
        return CaldialStatus::NullArgument;
    }
    let preds = match prediction_set(logits, n, classes, labels) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match find_optimal_temperature(&preds) {
        Ok(t) => {
            *out_t = t;
            CaldialStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Temperature-scaled probabilities of one logit row. `out_probs` receives
/// `classes` entries; the confidence and predicted class are optional
/// (pass null to skip).
///
/// # Safety
/// `logits` must hold `classes` doubles and `out_probs` room for the same.
#[no_mangle]
pub unsafe extern "C" fn caldial_scale_probs(
    logits: *const f64,
    classes: usize,
    temperature: f64,
    out_probs: *mut f64,
    out_confidence: *mut f64,
    out_predicted: *mut usize,
) -> CaldialStatus {
    if logits.is_null() || out_probs.is_null() {
        set_error("null logits or out_probs");
        return CaldialStatus::NullArgument;
    }
    let row = std::slice::from_raw_parts(logits, classes);
    match scale_probs(row, temperature) {
        Ok(scaled) => {
            std::ptr::copy_nonoverlapping(scaled.probs.as_ptr(), out_probs, classes);
            if !out_confidence.is_null() {
                *out_confidence = scaled.confidence;
            }
            if !out_predicted.is_null() {
                *out_predicted = scaled.predicted;
            }
            CaldialStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Corpus-level BLEU-1 over `n` prediction/reference sentence pairs. The
/// sentences are tokenized with the library tokenizer.
///
/// # Safety
/// `predictions` and `references` must each hold `n` valid NUL-terminated
/// strings; `out_score` must be valid.
#[no_mangle]
pub unsafe extern "C" fn caldial_bleu1(
    predictions: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out_score: *mut f64,
) -> CaldialStatus {
    if predictions.is_null() || references.is_null() || out_score.is_null() {
        set_error("null predictions, references, or out_score");
        return CaldialStatus::NullArgument;
    }
    let mut preds = Vec::with_capacity(n);
    let mut refs = Vec::with_capacity(n);
    for i in 0..n {
        let p = match utf8_arg(*predictions.add(i)) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let r = match utf8_arg(*references.add(i)) {
            Ok(s) => s,
            Err(status) => return status,
        };
        preds.push(tokenize(p));
        refs.push(tokenize(r));
    }
    match bleu1(&preds, &refs) {
        Ok(score) => {
            *out_score = score;
            CaldialStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Exact-match METEOR of one prediction/reference pair, tokenized with the
/// library tokenizer.
///
/// # Safety
/// Both strings must be valid and NUL-terminated; `out_score` must be valid.
#[no_mangle]
pub unsafe extern "C" fn caldial_meteor(
    prediction: *const c_char,
    reference: *const c_char,
    out_score: *mut f64,
) -> CaldialStatus {
    if out_score.is_null() {
        set_error("null out_score");
        return CaldialStatus::NullArgument;
    }
    let p = match utf8_arg(prediction) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let r = match utf8_arg(reference) {
        Ok(s) => s,
        Err(status) => return status,
    };
    *out_score = meteor(&tokenize(p), &tokenize(r));
    CaldialStatus::Ok
}
