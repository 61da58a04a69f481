//! C ABI over `hiergat`.
//!
//! Objects cross the boundary as opaque handles created by
//! `hg_hierarchy_parse`, `hg_hierarchy_cell_populations` or `hg_model_load`
//! and released with the matching `hg_*_free`.
//! Every fallible call returns an [`HgStatus`] code; on failure the message
//! is available from [`hg_last_error`] on the same thread until the next
//! failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use hiergat::cli::TrainedRun;
use hiergat::constraint;
use hiergat::knngraph;
use hiergat::{Error, Hierarchy};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Shape = 5,
    Panic = 6,
}

/// Opaque class hierarchy.
pub struct HgHierarchy(Hierarchy);

/// Opaque trained model.
pub struct HgModel(TrainedRun);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> HgStatus {
    match e {
        Error::Io(_) => HgStatus::Io,
        Error::Shape(_) => HgStatus::Shape,
        Error::EmptyHierarchy
        | Error::Cycle(_)
        | Error::DuplicateParent { .. }
        | Error::HierarchySyntax { .. }
        | Error::UnknownClass(_)
        | Error::MissingColumn(_)
        | Error::NonNumeric { .. }
        | Error::Format { .. }
        | Error::Csv(_)
        | Error::Json(_) => HgStatus::Parse,
        _ => HgStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (HgStatus, String)>) -> HgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HgStatus::Panic
        }
    }
}

fn lib<T>(r: hiergat::Result<T>) -> Result<T, (HgStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (HgStatus, String) {
    (HgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (HgStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (HgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (HgStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (HgStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (HgStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread (empty if none). The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn hg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a class tree given as `parent<TAB>child` lines (a bare name on a
/// line declares a top-level class).
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hg_hierarchy_parse(text: *const c_char, out: *mut *mut HgHierarchy) -> HgStatus {
    guard(|| {
        let text = c_str(text, "text")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let h = lib(Hierarchy::parse(text))?;
        *out = Box::into_raw(Box::new(HgHierarchy(h)));
        Ok(())
    })
}

/// The built-in seven-class cell population tree.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hg_hierarchy_cell_populations(out: *mut *mut HgHierarchy) -> HgStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = Box::into_raw(Box::new(HgHierarchy(Hierarchy::cell_populations())));
        Ok(())
    })
}

/// Releases a hierarchy. Null is ignored.
///
/// # Safety
/// `h` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hg_hierarchy_free(h: *mut HgHierarchy) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of classes.
///
/// # Safety
/// `h` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hg_hierarchy_len(h: *const HgHierarchy) -> usize {
    h.as_ref().map_or(0, |h| h.0.len())
}

/// Looks up a class id by name.
///
/// # Safety
/// `h` must be a live handle, `name` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn hg_hierarchy_class_id(
    h: *const HgHierarchy,
    name: *const c_char,
    out: *mut usize,
) -> HgStatus {
    guard(|| {
        let h = handle(h, "hierarchy")?;
        let name = c_str(name, "name")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = lib(h.0.id(name))?.0;
        Ok(())
    })
}

/// Max-constraint scores of `n_rows` row-major score vectors of the
/// hierarchy's width.
///
/// # Safety
/// `raw` and `out` must hold `n_rows * hg_hierarchy_len(h)` values.
#[no_mangle]
pub unsafe extern "C" fn hg_mcm(h: *const HgHierarchy, raw: *const f64, n_rows: usize, out: *mut f64) -> HgStatus {
    guard(|| {
        let h = handle(h, "hierarchy")?;
        let len = n_rows * h.0.len();
        let raw = input(raw, len, "raw")?;
        let out = output(out, len, "out")?;
        out.copy_from_slice(&constraint::mcm_rows(&h.0, raw));
        Ok(())
    })
}

/// Weighted max-constraint loss of one sample. `y` is the ancestor-closed
/// 0/1 target; `weights` may be null for unit weights.
///
/// # Safety
/// `raw`, `y` and non-null `weights` must hold `hg_hierarchy_len(h)` values.
#[no_mangle]
pub unsafe extern "C" fn hg_mcloss(
    h: *const HgHierarchy,
    raw: *const f64,
    y: *const f64,
    weights: *const f64,
    out: *mut f64,
) -> HgStatus {
    guard(|| {
        let h = handle(h, "hierarchy")?;
        let c = h.0.len();
        let raw = input(raw, c, "raw")?;
        let y = input(y, c, "y")?;
        let ones = vec![1.0; c];
        let w = if weights.is_null() {
            &ones[..]
        } else {
            input(weights, c, "weights")?
        };
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = lib(constraint::mcloss(&h.0, raw, y, w))?;
        Ok(())
    })
}

/// Counts hierarchy violations over `n_rows` row-major score vectors.
///
/// # Safety
/// `scores` must hold `n_rows * hg_hierarchy_len(h)` values.
#[no_mangle]
pub unsafe extern "C" fn hg_check_coherence(
    h: *const HgHierarchy,
    scores: *const f64,
    n_rows: usize,
    out_count: *mut usize,
) -> HgStatus {
    guard(|| {
        let h = handle(h, "hierarchy")?;
        let scores = input(scores, n_rows * h.0.len(), "scores")?;
        let out = out_count.as_mut().ok_or_else(|| null("out_count"))?;
        *out = constraint::check_coherence(&h.0, scores);
        Ok(())
    })
}

/// Exact k-NN lists over `n` row-major points of dimension `m`. `out`
/// receives `n * k` indices; when `k >= n` only `n * (n - 1)` are written
/// and `out_k` reports the effective `k`.
///
/// # Safety
/// `features` must hold `n * m` values, `out` room for `n * k` indices.
#[no_mangle]
pub unsafe extern "C" fn hg_knn_build(
    features: *const f64,
    n: usize,
    m: usize,
    k: usize,
    out: *mut u32,
    out_k: *mut usize,
) -> HgStatus {
    guard(|| {
        let x = input(features, n * m, "features")?;
        let out = output(out, n * k, "out")?;
        let out_k = out_k.as_mut().ok_or_else(|| null("out_k"))?;
        let g = lib(knngraph::build_knn(x, m, k))?;
        for i in 0..g.n() {
            for (slot, &j) in out[i * g.k()..(i + 1) * g.k()].iter_mut().zip(g.neighbors(i)) {
                *slot = u32::try_from(j).map_err(|_| (HgStatus::InvalidArgument, "index overflows u32".to_owned()))?;
            }
        }
        *out_k = g.k();
        Ok(())
    })
}

/// Loads a trained run directory (`config.json` + `checkpoint.hcgat`).
///
/// # Safety
/// `dir` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn hg_model_load(dir: *const c_char, out: *mut *mut HgModel) -> HgStatus {
    guard(|| {
        let dir = c_str(dir, "dir")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let run = lib(TrainedRun::load(dir))?;
        *out = Box::into_raw(Box::new(HgModel(run)));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`hg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hg_model_free(model: *mut HgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of input features the model expects.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hg_model_num_features(model: *const HgModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.params.input_dim())
}

/// Number of classes the model scores.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hg_model_num_classes(model: *const HgModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.params.output_dim())
}

/// Scores `n` rows of raw (unnormalized) features. The rows form their own
/// k-NN graph. `out_scores` receives `n * classes` decision scores
/// (constrained for hierarchical models).
///
/// # Safety
/// `features` must hold `n * num_features` values, `out_scores` room for
/// `n * num_classes`.
#[no_mangle]
pub unsafe extern "C" fn hg_model_scores(
    model: *const HgModel,
    features: *const f64,
    n: usize,
    out_scores: *mut f64,
) -> HgStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let x = input(features, n * model.0.params.input_dim(), "features")?;
        let out = output(out_scores, n * model.0.params.output_dim(), "out_scores")?;
        let scored = lib(model.0.score_features(x))?;
        out.copy_from_slice(&scored.scores);
        Ok(())
    })
}

/// Most-specific predicted class id of each of `n` rows.
///
/// # Safety
/// As [`hg_model_scores`]; `out_class` must have room for `n` ids.
#[no_mangle]
pub unsafe extern "C" fn hg_model_predict(
    model: *const HgModel,
    features: *const f64,
    n: usize,
    out_class: *mut usize,
) -> HgStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let x = input(features, n * model.0.params.input_dim(), "features")?;
        let out = output(out_class, n, "out_class")?;
        let scored = lib(model.0.score_features(x))?;
        let pred = lib(model.0.predict(&scored.scores, None))?;
        for (o, c) in out.iter_mut().zip(&pred.most_specific) {
            *o = c.0;
        }
        Ok(())
    })
}

/// Clears the thread's last error message.
#[no_mangle]
pub extern "C" fn hg_clear_error() {
    set_error(String::new());
}
