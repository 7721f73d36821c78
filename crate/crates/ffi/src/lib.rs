//! C interface: load a checkpoint, score histories, aggregate ranking metrics.
//!
//! Every fallible call returns a [`DpgStatus`]. On failure the message is
//! available from [`dpg_last_error`] on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use dpgdiff::checkpoint::load_model;
use dpgdiff::dataset::{Domain, Token};
use dpgdiff::eval::{compute_metrics, GuidedScorer, Scorer};
use dpgdiff::network::Model;
use dpgdiff::DpgError;

/// Result codes of the C interface.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    InvalidArgument = 6,
    IndexOutOfRange = 7,
    NonFinite = 8,
    BufferTooSmall = 9,
    Internal = 10,
}

/// Opaque handle to a loaded model.
pub struct DpgModel {
    model: Model,
}

/// Sampled ranking metrics in `[0, 1]`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DpgMetrics {
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub n_users: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &DpgError) -> DpgStatus {
    match e {
        DpgError::Io { .. } | DpgError::EmptyFile { .. } => DpgStatus::Io,
        DpgError::Parse(_) | DpgError::UnknownDomain { .. } => DpgStatus::Parse,
        DpgError::Checkpoint(_) => DpgStatus::Checkpoint,
        DpgError::IndexOutOfRange { .. } => DpgStatus::IndexOutOfRange,
        DpgError::NonFinite(_) => DpgStatus::NonFinite,
        DpgError::InvalidArgument(_) | DpgError::NoSurvivors(_) | DpgError::MalformedExample(_) => {
            DpgStatus::InvalidArgument
        }
    }
}

fn guard<F: FnOnce() -> Result<(), (DpgStatus, String)>>(f: F) -> DpgStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DpgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DpgStatus::Internal
        }
    }
}

fn lift(e: DpgError) -> (DpgStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DpgStatus, String) {
    (DpgStatus::NullPointer, format!("{what} is null"))
}

fn domain_of(code: u8) -> Result<Domain, (DpgStatus, String)> {
    match code {
        0 => Ok(Domain::X),
        1 => Ok(Domain::Y),
        _ => Err((DpgStatus::InvalidArgument, format!("domain code {code} is not 0 (X) or 1 (Y)"))),
    }
}

/// Message of the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dpg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dpg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the checkpoint directory `path`. With `best` set, the best
/// validated parameters are used when present.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dpg_model_load(path: *const c_char, best: bool, out: *mut *mut DpgModel) -> DpgStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (DpgStatus::InvalidUtf8, "path is not UTF-8".to_string()))?;
        let model = load_model(Path::new(path), best).map_err(lift)?;
        *out = Box::into_raw(Box::new(DpgModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`dpg_model_load`]; null is ignored.
///
/// # Safety
/// `model` must come from [`dpg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dpg_model_free(model: *mut DpgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding-table rows of a domain (0 = X, 1 = Y), including the two
/// reserved rows; 0 for a null handle or an unknown domain.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpg_model_table_size(model: *const DpgModel, domain: u8) -> usize {
    match (model.as_ref(), domain) {
        (Some(m), 0) => m.model.cfg.vocab_x,
        (Some(m), 1) => m.model.cfg.vocab_y,
        _ => 0,
    }
}

/// Number of reverse diffusion steps of a full pass; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpg_model_diffusion_steps(model: *const DpgModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.cfg.diffusion_steps)
}

/// Scores every row of the target domain's table for one history.
///
/// `items[i]` and `domains[i]` describe the i-th interaction, oldest first.
/// `n_steps = 0` runs the full reverse schedule. The output buffer must hold
/// [`dpg_model_table_size`] entries; reserved rows receive 0.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn dpg_model_score(
    model: *const DpgModel,
    items: *const usize,
    domains: *const u8,
    len: usize,
    target_domain: u8,
    n_steps: usize,
    seed: u64,
    user_index: usize,
    out_scores: *mut f64,
    out_len: usize,
) -> DpgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if len > 0 && (items.is_null() || domains.is_null()) {
            return Err(null("history"));
        }
        if out_scores.is_null() {
            return Err(null("out_scores"));
        }
        let target = domain_of(target_domain)?;
        let seq = if len == 0 {
            Vec::new()
        } else {
            slice::from_raw_parts(items, len)
                .iter()
                .zip(slice::from_raw_parts(domains, len))
                .map(|(&item, &d)| domain_of(d).map(|d| Token::new(item, d)))
                .collect::<Result<Vec<_>, _>>()?
        };
        let scorer = GuidedScorer::new(&m.model).map_err(lift)?;
        let steps = if n_steps == 0 { scorer.full_steps() } else { n_steps };
        let scores = scorer.score(user_index, &seq, target, steps, seed).map_err(lift)?;
        if out_len < scores.len() {
            return Err((
                DpgStatus::BufferTooSmall,
                format!("output buffer holds {out_len} scores, need {}", scores.len()),
            ));
        }
        ptr::copy_nonoverlapping(scores.as_ptr(), out_scores, scores.len());
        Ok(())
    })
}

/// Aggregates 1-based ranks of the positive items into metrics.
///
/// # Safety
/// `ranks` must be valid for `n` reads and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dpg_compute_metrics(ranks: *const usize, n: usize, out: *mut DpgMetrics) -> DpgStatus {
    guard(|| {
        if ranks.is_null() {
            return Err(null("ranks"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let r = compute_metrics(slice::from_raw_parts(ranks, n)).map_err(lift)?;
        *out = DpgMetrics {
            mrr: r.mrr,
            ndcg5: r.ndcg5,
            ndcg10: r.ndcg10,
            hr5: r.hr5,
            hr10: r.hr10,
            n_users: r.n_users,
        };
        Ok(())
    })
}
