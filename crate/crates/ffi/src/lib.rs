//! C ABI over the detector, evaluation and matching routines.
//!
//! Every fallible function returns an [`SfodStatus`]; on failure the message
//! is kept per thread and read with [`sfod_last_error`]. Models and datasets
//! are opaque handles released with their `_free` function. No panic crosses
//! the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sfod::data::Dataset;
use sfod::detector::{Detector, DetectorParams};
use sfod::eval::{detect, evaluate, EvalConfig};
use sfod::matching::hungarian;
use sfod::teacher::dtui_interval;
use sfod::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfodStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Mismatch = 4,
    Io = 5,
    Format = 6,
    Numerics = 7,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 8,
    Panic = 9,
}

/// Loaded detector weights.
pub struct SfodModel {
    det: Detector,
    params: DetectorParams,
}

/// Loaded dataset split.
pub struct SfodDataset {
    data: Dataset,
}

/// One detection; box in normalized centre format.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SfodDetection {
    /// 1-based class.
    pub class_id: u32,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: SfodStatus, msg: impl Into<String>) -> SfodStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> SfodStatus {
    let status = match &e {
        Error::Config(_) => SfodStatus::Config,
        Error::Mismatch(_) => SfodStatus::Mismatch,
        Error::Io(_) => SfodStatus::Io,
        Error::Format(_) => SfodStatus::Format,
        Error::Numerics(_) | Error::Tensor(_) => SfodStatus::Numerics,
    };
    fail(status, e.to_string())
}

/// Runs `f`, clearing the error slot first and converting panics.
fn guard(f: impl FnOnce() -> Result<(), SfodStatus>) -> SfodStatus {
    set_error(String::new());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfodStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(SfodStatus::Panic, "internal panic"),
    }
}

fn path_arg(path: *const c_char) -> Result<PathBuf, SfodStatus> {
    if path.is_null() {
        return Err(fail(SfodStatus::NullPointer, "path is null"));
    }
    // SAFETY: the caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(path) };
    s.to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(SfodStatus::InvalidArgument, "path is not UTF-8"))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), SfodStatus> {
    if p.is_null() {
        Err(fail(SfodStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sfod_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            // SAFETY: n < len and the caller guarantees len writable bytes.
            unsafe {
                ptr::copy_nonoverlapping(e.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        e.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sfod_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a pretraining or adaptation checkpoint. Adaptation checkpoints yield
/// the teacher unless `student` is non-zero.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfod_model_load(path: *const c_char, student: i32, out: *mut *mut SfodModel) -> SfodStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = path_arg(path)?;
        let params = DetectorParams::load_checkpoint(&path, student != 0).map_err(from_error)?;
        let det = Detector::new(*params.config()).map_err(from_error)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(SfodModel { det, params })) };
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`sfod_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sfod_model_free(model: *mut SfodModel) {
    if !model.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Input geometry and class count of a model. Images are `height * width * 3`
/// values, row-major with interleaved channels in [0, 1].
///
/// # Safety
/// `model` must be a live handle; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sfod_model_info(
    model: *const SfodModel,
    height: *mut usize,
    width: *mut usize,
    num_classes: *mut usize,
    num_queries: *mut usize,
) -> SfodStatus {
    guard(|| {
        non_null(model, "model")?;
        for (p, n) in [(height, "height"), (width, "width"), (num_classes, "num_classes"), (num_queries, "num_queries")] {
            non_null(p, n)?;
        }
        // SAFETY: all pointers checked non-null above.
        unsafe {
            let c = (*model).params.config();
            *height = c.image_h;
            *width = c.image_w;
            *num_classes = c.num_classes;
            *num_queries = c.n_queries;
        }
        Ok(())
    })
}

/// Runs the detector on one image and writes detections scoring at least
/// `score_floor`. `*written` receives the detection count; when it exceeds
/// `capacity` nothing is copied and `BufferTooSmall` is returned. At most
/// `num_queries` detections are produced.
///
/// # Safety
/// `image` must hold `image_len` values, `out` must be null or hold
/// `capacity` entries, and `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sfod_model_detect(
    model: *const SfodModel,
    image: *const f64,
    image_len: usize,
    score_floor: f64,
    out: *mut SfodDetection,
    capacity: usize,
    written: *mut usize,
) -> SfodStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(image, "image")?;
        non_null(written, "written")?;
        // SAFETY: checked non-null; lengths are the caller's contract.
        let (m, image) = unsafe { (&*model, std::slice::from_raw_parts(image, image_len)) };
        let dets = detect(&m.det, &m.params, image, 0, score_floor).map_err(from_error)?;
        // SAFETY: checked non-null above.
        unsafe { *written = dets.len() };
        if dets.len() > capacity {
            return Err(fail(SfodStatus::BufferTooSmall, format!("{} detections, capacity {capacity}", dets.len())));
        }
        if !dets.is_empty() {
            non_null(out, "out")?;
        }
        for (i, d) in dets.iter().enumerate() {
            // SAFETY: i < dets.len() <= capacity.
            unsafe {
                *out.add(i) = SfodDetection {
                    class_id: d.class as u32,
                    score: d.score,
                    cx: d.bbox.cx,
                    cy: d.bbox.cy,
                    w: d.bbox.w,
                    h: d.bbox.h,
                }
            };
        }
        Ok(())
    })
}

/// Loads a dataset split written by `sfod gen-data`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfod_dataset_load(path: *const c_char, out: *mut *mut SfodDataset) -> SfodStatus {
    guard(|| {
        non_null(out, "out")?;
        let data = Dataset::load(&path_arg(path)?).map_err(from_error)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(SfodDataset { data })) };
        Ok(())
    })
}

/// Number of images in a dataset, 0 for null.
///
/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfod_dataset_len(data: *const SfodDataset) -> usize {
    if data.is_null() {
        0
    } else {
        // SAFETY: live handle per the contract.
        unsafe { (*data).data.len() }
    }
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `data` must come from [`sfod_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sfod_dataset_free(data: *mut SfodDataset) {
    if !data.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(data) });
    }
}

/// mAP at the given IoU threshold over a dataset.
///
/// # Safety
/// Handles must be live and `map` valid.
#[no_mangle]
pub unsafe extern "C" fn sfod_model_evaluate(
    model: *const SfodModel,
    data: *const SfodDataset,
    iou_thresh: f64,
    score_floor: f64,
    map: *mut f64,
) -> SfodStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(data, "data")?;
        non_null(map, "map")?;
        if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
            return Err(fail(SfodStatus::InvalidArgument, format!("iou_thresh {iou_thresh} outside (0, 1]")));
        }
        // SAFETY: checked non-null above.
        let (m, d) = unsafe { (&*model, &(*data).data) };
        let cfg = EvalConfig { iou_thresh, score_floor };
        let r = evaluate(&m.det, &m.params, d, &cfg).map_err(from_error)?;
        // SAFETY: checked non-null above.
        unsafe { *map = r.map50 };
        Ok(())
    })
}

/// Teacher update interval for an epoch under the dynamic schedule.
#[no_mangle]
pub extern "C" fn sfod_dtui_interval(epoch: u64, delta: u64, eps: u64) -> u64 {
    dtui_interval(epoch, delta, eps)
}

/// Minimum-cost assignment on a row-major `rows x cols` matrix. Writes the
/// matched column of each row into `assignment` (-1 when unmatched) and the
/// summed cost into `total`.
///
/// # Safety
/// `cost` must hold `rows * cols` values, `assignment` `rows` entries, and
/// `total` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sfod_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    assignment: *mut i64,
    total: *mut f64,
) -> SfodStatus {
    guard(|| {
        non_null(total, "total")?;
        let n = rows.checked_mul(cols).ok_or_else(|| fail(SfodStatus::InvalidArgument, "matrix too large"))?;
        if n == 0 {
            // SAFETY: checked non-null above.
            unsafe { *total = 0.0 };
            if rows > 0 {
                non_null(assignment, "assignment")?;
                // SAFETY: the caller provides rows entries.
                unsafe { std::slice::from_raw_parts_mut(assignment, rows).fill(-1) };
            }
            return Ok(());
        }
        non_null(cost, "cost")?;
        non_null(assignment, "assignment")?;
        // SAFETY: lengths are the caller's contract.
        let flat = unsafe { std::slice::from_raw_parts(cost, n) };
        if let Some(v) = flat.iter().find(|v| !v.is_finite()) {
            return Err(fail(SfodStatus::InvalidArgument, format!("non-finite cost {v}")));
        }
        let matrix: Vec<Vec<f64>> = flat.chunks(cols).map(<[f64]>::to_vec).collect();
        let a = hungarian(&matrix);
        // SAFETY: the caller provides rows entries.
        let out = unsafe { std::slice::from_raw_parts_mut(assignment, rows) };
        out.fill(-1);
        for &(r, c) in &a.pairs {
            out[r] = c as i64;
        }
        // SAFETY: checked non-null above.
        unsafe { *total = a.total_cost(&matrix) };
        Ok(())
    })
}
