//! C ABI for scoring with trained nda-core models.
//!
//! Handles are opaque pointers owned by the caller and released with
//! [`nda_scorer_free`]. Every fallible function returns an [`NdaStatus`];
//! on failure [`nda_last_error`] describes the most recent error on the
//! calling thread. Vectors are passed as contiguous `double` arrays,
//! several vectors stacked row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nda_core::pipeline::Scorer;
use nda_core::{compute_eer, compute_min_dcf, Error, ScoreSet};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    Numerical = 6,
    Panic = 7,
}

/// Opaque scoring handle: a model bundle or a synthetic-corpus oracle.
pub struct NdaScorer {
    inner: Scorer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> NdaStatus {
    match e {
        Error::Io { .. } => NdaStatus::Io,
        Error::Parse { .. } | Error::Format { .. } | Error::Json(_) => NdaStatus::Format,
        Error::Dimension { .. } => NdaStatus::DimensionMismatch,
        Error::NonFinite(_) | Error::Singular(_) | Error::Divergence { .. } => NdaStatus::Numerical,
        Error::InvalidInput(_) => NdaStatus::InvalidArgument,
    }
}

fn guard<F: FnOnce() -> Result<(), (NdaStatus, String)>>(f: F) -> NdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            NdaStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NdaStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (NdaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (NdaStatus, String) {
    (NdaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (NdaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (NdaStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn doubles<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], (NdaStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn store_scorer(out: *mut *mut NdaScorer, scorer: Result<Scorer, Error>) -> Result<(), (NdaStatus, String)> {
    let inner = scorer.map_err(core_err)?;
    *out = Box::into_raw(Box::new(NdaScorer { inner }));
    Ok(())
}

/// Loads a model bundle or oracle JSON file. On success `*out` receives a
/// handle to release with [`nda_scorer_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nda_scorer_load(path: *const c_char, out: *mut *mut NdaScorer) -> NdaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        store_scorer(out, Scorer::load(path))
    })
}

/// Like [`nda_scorer_load`] but reads the model from a JSON string.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nda_scorer_from_json(json: *const c_char, out: *mut *mut NdaScorer) -> NdaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let json = c_str(json, "json")?;
        store_scorer(out, Scorer::from_json(json))
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `scorer` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nda_scorer_free(scorer: *mut NdaScorer) {
    if !scorer.is_null() {
        drop(Box::from_raw(scorer));
    }
}

/// Dimension of the vectors the model accepts; 0 for a null handle.
///
/// # Safety
/// `scorer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nda_scorer_input_dim(scorer: *const NdaScorer) -> usize {
    scorer.as_ref().map_or(0, |s| s.inner.input_dim())
}

/// Dimension of the latent vectors produced by [`nda_scorer_embed`].
///
/// # Safety
/// `scorer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nda_scorer_latent_dim(scorer: *const NdaScorer) -> usize {
    scorer.as_ref().map_or(0, |s| s.inner.epsilon().len())
}

/// Log likelihood-ratio score of one trial. `enroll` holds `n_enroll`
/// vectors of `dim` values each; `test` holds one.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn nda_scorer_score(
    scorer: *const NdaScorer,
    enroll: *const f64,
    n_enroll: usize,
    test: *const f64,
    dim: usize,
    out_score: *mut f64,
) -> NdaStatus {
    guard(|| {
        let s = scorer.as_ref().ok_or_else(|| null("scorer"))?;
        if out_score.is_null() {
            return Err(null("out_score"));
        }
        if dim != s.inner.input_dim() {
            return Err(core_err(Error::Dimension {
                expected: s.inner.input_dim(),
                found: dim,
            }));
        }
        if n_enroll == 0 {
            return Err((NdaStatus::InvalidArgument, "trial needs at least one enrollment vector".into()));
        }
        let enroll = doubles(enroll, n_enroll * dim, "enroll")?;
        let test = doubles(test, dim, "test")?;
        let rows: Vec<&[f64]> = enroll.chunks_exact(dim).collect();
        *out_score = s.inner.score_trial(&rows, test).map_err(core_err)?;
        Ok(())
    })
}

/// Maps one input vector to the latent space the model scores in, writing
/// `out_len` (= latent dim) values.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn nda_scorer_embed(
    scorer: *const NdaScorer,
    x: *const f64,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> NdaStatus {
    guard(|| {
        let s = scorer.as_ref().ok_or_else(|| null("scorer"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = doubles(x, dim, "x")?;
        let z = s.inner.embed(x).map_err(core_err)?;
        if z.len() != out_len {
            return Err(core_err(Error::Dimension {
                expected: z.len(),
                found: out_len,
            }));
        }
        slice::from_raw_parts_mut(out, out_len).copy_from_slice(&z);
        Ok(())
    })
}

unsafe fn score_set(scores: *const f64, labels: *const u8, n: usize) -> Result<ScoreSet, (NdaStatus, String)> {
    let scores = doubles(scores, n, "scores")?;
    if n > 0 && labels.is_null() {
        return Err(null("labels"));
    }
    let labels = if n == 0 { &[][..] } else { slice::from_raw_parts(labels, n) };
    ScoreSet::new(scores.to_vec(), labels.iter().map(|&l| l != 0).collect()).map_err(core_err)
}

/// Equal error rate of `n` scores; `labels[i]` is nonzero for target trials.
///
/// # Safety
/// Arrays must hold `n` elements and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nda_eer(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> NdaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = compute_eer(&score_set(scores, labels, n)?);
        Ok(())
    })
}

/// Normalized minimum detection cost at target prior `p_target`.
///
/// # Safety
/// Arrays must hold `n` elements and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nda_min_dcf(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    p_target: f64,
    out: *mut f64,
) -> NdaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = compute_min_dcf(&score_set(scores, labels, n)?, p_target).map_err(core_err)?;
        Ok(())
    })
}

/// Message for the last failed call on this thread, empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn nda_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
