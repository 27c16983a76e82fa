//! C ABI over the owdetr detector, matcher and metrics.
//!
//! Every fallible call returns an [`OwdetrStatus`]; on failure the message is
//! available from [`owdetr_last_error`] on the same thread. Handles are opaque
//! and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use owdetr::data::{load_manifest, BoundingBox};
use owdetr::matching::{hungarian_assign, CostMatrix};
use owdetr::metrics::{evaluate, load_detections, truths_from_manifest, EvalConfig};
use owdetr::numerics::Tensor;
use owdetr::openworld::{objectness_score, WindowRule};
use owdetr::protocol::{checkpoint_load, infer, Detection, EpisodeState, InferConfig};
use owdetr::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OwdetrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Contract = 4,
    Capacity = 5,
    Score = 6,
    Divergence = 7,
    Config = 8,
    Parse = 9,
    Version = 10,
    Checksum = 11,
    Truncated = 12,
    Missing = 13,
    Io = 14,
    Panic = 15,
}

impl From<&Error> for OwdetrStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => OwdetrStatus::Dimension,
            Error::Contract(_) => OwdetrStatus::Contract,
            Error::Capacity { .. } => OwdetrStatus::Capacity,
            Error::Score(_) => OwdetrStatus::Score,
            Error::Divergence(_) => OwdetrStatus::Divergence,
            Error::Config { .. } => OwdetrStatus::Config,
            Error::Parse { .. } => OwdetrStatus::Parse,
            Error::Version { .. } => OwdetrStatus::Version,
            Error::Checksum => OwdetrStatus::Checksum,
            Error::Truncated { .. } => OwdetrStatus::Truncated,
            Error::Missing(_) => OwdetrStatus::Missing,
            Error::Io(_) => OwdetrStatus::Io,
        }
    }
}

/// A trained detector loaded from a checkpoint.
pub struct OwdetrModel {
    state: EpisodeState,
}

/// Detections of one image, highest score first.
pub struct OwdetrDetections {
    items: Vec<Detection>,
}

/// One detection; the box is center format in normalized image coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OwdetrDetection {
    /// 0 is the unknown class.
    pub label: u32,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Fail {
    Status(OwdetrStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn null(name: &str) -> Fail {
    Fail::Status(OwdetrStatus::NullArgument, format!("`{name}` is null"))
}

/// Runs `f`, translating errors and panics into a status plus the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OwdetrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            OwdetrStatus::Ok
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            OwdetrStatus::from(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            OwdetrStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail::Status(OwdetrStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(null(name)),
        (false, n) => Ok(std::slice::from_raw_parts(p, n)),
    }
}

/// Message of the last failed call on this thread, or an empty string.
///
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn owdetr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn owdetr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn owdetr_model_load(path: *const c_char, out: *mut *mut OwdetrModel) -> OwdetrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let state = checkpoint_load(&path)?;
        *out = Box::into_raw(Box::new(OwdetrModel { state }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`owdetr_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn owdetr_model_free(model: *mut OwdetrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Classifier width: one unknown column plus one per known class.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn owdetr_model_class_width(model: *const OwdetrModel, out: *mut usize) -> OwdetrStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            return Err(null(if model.is_null() { "model" } else { "out" }));
        };
        *out = m.state.labels.width();
        Ok(())
    })
}

/// Copies up to `cap` known labels in column order into `buf` and stores the full count in `len`.
///
/// # Safety
/// `model` must be a live handle, `buf` valid for `cap` writes (or null when `cap` is 0), `len` valid.
#[no_mangle]
pub unsafe extern "C" fn owdetr_model_known_labels(
    model: *const OwdetrModel,
    buf: *mut u32,
    cap: usize,
    len: *mut usize,
) -> OwdetrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if len.is_null() {
            return Err(null("len"));
        }
        if buf.is_null() && cap > 0 {
            return Err(null("buf"));
        }
        let known = m.state.labels.known();
        for (i, &l) in known.iter().take(cap).enumerate() {
            *buf.add(i) = l;
        }
        *len = known.len();
        Ok(())
    })
}

/// Runs the detector on one `channels×height×width` image of row-major pixels.
///
/// `top_k` of 0 selects the default of 50. The result is capped at queries × classifier width.
///
/// # Safety
/// `pixels` must hold `channels*height*width` values; `model` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn owdetr_model_infer(
    model: *const OwdetrModel,
    pixels: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    top_k: usize,
    out: *mut *mut OwdetrDetections,
) -> OwdetrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let n = channels * height * width;
        if n == 0 {
            return Err(Error::Dimension("image has no pixels".into()).into());
        }
        let px = slice_arg(pixels, n, "pixels")?;
        let image = Tensor::new(&[channels, height, width], px.to_vec())?;
        let mut cfg = InferConfig::default();
        if top_k > 0 {
            cfg.top_k = top_k;
        }
        let set = infer(&m.state, &image, 0, &cfg)?;
        *out = Box::into_raw(Box::new(OwdetrDetections { items: set.detections }));
        Ok(())
    })
}

/// Number of detections in the set; 0 for null.
///
/// # Safety
/// `dets` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn owdetr_detections_len(dets: *const OwdetrDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.items.len())
}

/// Copies detection `index` into `out`.
///
/// # Safety
/// `dets` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn owdetr_detections_get(
    dets: *const OwdetrDetections,
    index: usize,
    out: *mut OwdetrDetection,
) -> OwdetrStatus {
    guard(|| {
        let d = dets.as_ref().ok_or_else(|| null("dets"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let Some(det) = d.items.get(index) else {
            return Err(Error::Contract(format!("index {index} out of range for {} detections", d.items.len())).into());
        };
        let b = det.bbox;
        *out = OwdetrDetection {
            label: det.label,
            score: det.score,
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        };
        Ok(())
    })
}

/// # Safety
/// `dets` must come from [`owdetr_model_infer`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn owdetr_detections_free(dets: *mut OwdetrDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Minimum-cost assignment of each of `cols` ground truths to a distinct query among `rows`.
///
/// `cost` is row-major `rows×cols` (query × ground truth). On success `query_of_gt[g]`
/// holds the query assigned to ground truth `g`.
///
/// # Safety
/// `cost` must hold `rows*cols` values and `query_of_gt` must be valid for `cols` writes.
#[no_mangle]
pub unsafe extern "C" fn owdetr_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    query_of_gt: *mut usize,
) -> OwdetrStatus {
    guard(|| {
        let data = slice_arg(cost, rows * cols, "cost")?;
        if query_of_gt.is_null() && cols > 0 {
            return Err(null("query_of_gt"));
        }
        let result = hungarian_assign(&CostMatrix::new(rows, cols, data.to_vec())?)?;
        for &(q, g) in &result.pairs {
            *query_of_gt.add(g) = q;
        }
        Ok(())
    })
}

/// Mean of a `rows×cols` attention map over the window of a box (normalized center format).
///
/// # Safety
/// `attention` must hold `rows*cols` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn owdetr_objectness_score(
    attention: *const f64,
    rows: usize,
    cols: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    out: *mut f64,
) -> OwdetrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = slice_arg(attention, rows * cols, "attention")?;
        let a = Tensor::new(&[rows, cols], a.to_vec())?;
        *out = objectness_score(&a, &BoundingBox::new(cx, cy, w, h)?, WindowRule::CenterInclusion)?;
        Ok(())
    })
}

/// Scores a detections file against a test manifest and returns the report as JSON.
///
/// `task` is 1-based. Ground truth outside `previous ∪ current` counts as unknown.
/// The returned string must be released with [`owdetr_string_free`].
///
/// # Safety
/// Paths must be NUL-terminated; label arrays must hold the given counts; `out_json` must be valid.
#[no_mangle]
pub unsafe extern "C" fn owdetr_evaluate_files(
    detections_path: *const c_char,
    manifest_path: *const c_char,
    task: usize,
    previous: *const u32,
    n_previous: usize,
    current: *const u32,
    n_current: usize,
    out_json: *mut *mut c_char,
) -> OwdetrStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        *out_json = ptr::null_mut();
        let dets = load_detections(&path_arg(detections_path, "detections_path")?)?;
        let manifest = load_manifest(&path_arg(manifest_path, "manifest_path")?)?;
        let previous = slice_arg(previous, n_previous, "previous")?;
        let current = slice_arg(current, n_current, "current")?;
        let truths = truths_from_manifest(&manifest)?;
        let report = evaluate(task, &dets, &truths, previous, current, &EvalConfig::default())?;
        *out_json = CString::new(report.to_json()).expect("json has no nul").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn owdetr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
