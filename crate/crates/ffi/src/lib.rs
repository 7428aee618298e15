//! C ABI over the few-shot segmentation core.
//!
//! Checkpoints load into an opaque [`FewsegModel`]; callers hand over raw
//! RGB8/mask buffers (any size; they are resized to the model's input
//! side) and receive probability maps or thresholded masks. All entry
//! points return a [`FewsegStatus`]; the last error message is kept in
//! thread-local storage.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use fewseg_core::dataset::{resize_mask_buffer, resize_rgb_buffer, validate_registry, LoadedPair};
use fewseg_core::metrics::threshold_mask;
use fewseg_core::model::predict;
use fewseg_core::train::Checkpoint;

/// Call outcome. Everything except `Ok` leaves a message retrievable via
/// `fewseg_last_error_message`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FewsegStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Decode = 4,
    ShapeMismatch = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Opaque handle over a loaded checkpoint.
pub struct FewsegModel {
    checkpoint: Checkpoint,
}

/// Interleaved 8-bit RGB pixels, row-major.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FewsegImageView {
    pub data: *const u8,
    pub width: u32,
    pub height: u32,
}

/// 8-bit mask, row-major; any nonzero byte counts as foreground.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FewsegMaskView {
    pub data: *const u8,
    pub width: u32,
    pub height: u32,
}

/// One annotated support example.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FewsegSupport {
    pub image: FewsegImageView,
    pub mask: FewsegMaskView,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let message = message.into();
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn fail(status: FewsegStatus, message: impl Into<String>) -> FewsegStatus {
    set_error(message);
    status
}

/// Copy the last error message into `buf` (NUL-terminated, truncating);
/// returns the full message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn fewseg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        let bytes = message.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Static library version string.
#[no_mangle]
pub extern "C" fn fewseg_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

unsafe fn path_from(raw: *const c_char) -> Result<PathBuf, FewsegStatus> {
    if raw.is_null() {
        set_error("null path");
        return Err(FewsegStatus::NullArgument);
    }
    match CStr::from_ptr(raw).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(FewsegStatus::InvalidArgument)
        }
    }
}

/// Load a training checkpoint as an inference model.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer; on
/// `Ok` the caller owns the handle and must release it with
/// `fewseg_model_free`.
#[no_mangle]
pub unsafe extern "C" fn fewseg_model_load(
    path: *const c_char,
    out: *mut *mut FewsegModel,
) -> FewsegStatus {
    if out.is_null() {
        return fail(FewsegStatus::NullArgument, "null output handle");
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match Checkpoint::load(&path) {
        Ok(checkpoint) => {
            let model = Box::new(FewsegModel { checkpoint });
            *out = Box::into_raw(model);
            FewsegStatus::Ok
        }
        Err(err) => fail(FewsegStatus::Io, format!("loading {}: {err}", path.display())),
    }
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must come from `fewseg_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fewseg_model_free(model: *mut FewsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Spatial side of the model's input and output maps (0 on null).
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fewseg_model_input_size(model: *const FewsegModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).checkpoint.model_config.encoder.input_size as u32
}

unsafe fn view_bytes<'a>(data: *const u8, len: usize) -> Option<&'a [u8]> {
    if data.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(data, len))
    }
}

unsafe fn support_pair(
    support: &FewsegSupport,
    index: usize,
    side: usize,
) -> Result<LoadedPair, FewsegStatus> {
    let (iw, ih) = (support.image.width, support.image.height);
    let (mw, mh) = (support.mask.width, support.mask.height);
    if iw == 0 || ih == 0 {
        set_error(format!("support {index}: empty image"));
        return Err(FewsegStatus::InvalidArgument);
    }
    if (iw, ih) != (mw, mh) {
        set_error(format!(
            "support {index}: image {iw}x{ih} but mask {mw}x{mh}"
        ));
        return Err(FewsegStatus::ShapeMismatch);
    }
    let Some(rgb) = view_bytes(support.image.data, iw as usize * ih as usize * 3) else {
        set_error(format!("support {index}: null image data"));
        return Err(FewsegStatus::NullArgument);
    };
    let Some(mask) = view_bytes(support.mask.data, mw as usize * mh as usize) else {
        set_error(format!("support {index}: null mask data"));
        return Err(FewsegStatus::NullArgument);
    };
    let image = resize_rgb_buffer(rgb, iw, ih, side).map_err(|e| {
        set_error(format!("support {index}: {e}"));
        FewsegStatus::InvalidArgument
    })?;
    let mask = resize_mask_buffer(mask, mw, mh, side).map_err(|e| {
        set_error(format!("support {index}: {e}"));
        FewsegStatus::InvalidArgument
    })?;
    if mask.iter().all(|&v| v == 0) {
        set_error(format!("support {index}: mask has no foreground"));
        return Err(FewsegStatus::InvalidArgument);
    }
    Ok(LoadedPair {
        image,
        mask,
        source_path: format!("ffi://support-{index}"),
    })
}

unsafe fn run_segment(
    model: *const FewsegModel,
    supports: *const FewsegSupport,
    n_supports: usize,
    query: *const FewsegImageView,
    out_probs: *mut f32,
    out_len: usize,
) -> Result<(), FewsegStatus> {
    if model.is_null() || query.is_null() || out_probs.is_null() {
        set_error("null argument");
        return Err(FewsegStatus::NullArgument);
    }
    if supports.is_null() || n_supports == 0 {
        set_error("at least one support is required");
        return Err(FewsegStatus::InvalidArgument);
    }
    let model = &*model;
    let side = model.checkpoint.model_config.encoder.input_size;
    let needed = side * side;
    if out_len < needed {
        set_error(format!("output needs {needed} floats, got {out_len}"));
        return Err(FewsegStatus::BufferTooSmall);
    }

    let supports = std::slice::from_raw_parts(supports, n_supports);
    let mut pairs = Vec::with_capacity(n_supports);
    for (index, support) in supports.iter().enumerate() {
        pairs.push(support_pair(support, index, side)?);
    }

    let query = &*query;
    let (qw, qh) = (query.width, query.height);
    let Some(rgb) = view_bytes(query.data, qw as usize * qh as usize * 3) else {
        set_error("null query data");
        return Err(FewsegStatus::NullArgument);
    };
    let query_image = resize_rgb_buffer(rgb, qw, qh, side).map_err(|e| {
        set_error(format!("query: {e}"));
        FewsegStatus::InvalidArgument
    })?;

    let refs: Vec<&LoadedPair> = pairs.iter().collect();
    let result = catch_unwind(AssertUnwindSafe(|| {
        predict(
            &model.checkpoint.params,
            &model.checkpoint.model_config,
            &refs,
            &query_image,
        )
    }));
    let prediction = match result {
        Ok(Ok(p)) => p,
        Ok(Err(err)) => {
            set_error(err.to_string());
            return Err(FewsegStatus::Internal);
        }
        Err(_) => {
            set_error("internal panic during inference");
            return Err(FewsegStatus::Internal);
        }
    };

    let flat = prediction.probs.as_slice().expect("standard layout");
    std::ptr::copy_nonoverlapping(flat.as_ptr(), out_probs, needed);
    Ok(())
}

/// Segment `query` conditioned on `n_supports` annotated examples,
/// writing `input_size * input_size` foreground probabilities (row-major)
/// into `out_probs`.
///
/// # Safety
/// All pointers must be valid for the sizes implied by their views;
/// `out_probs` must hold at least `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn fewseg_segment(
    model: *const FewsegModel,
    supports: *const FewsegSupport,
    n_supports: usize,
    query: *const FewsegImageView,
    out_probs: *mut f32,
    out_len: usize,
) -> FewsegStatus {
    match run_segment(model, supports, n_supports, query, out_probs, out_len) {
        Ok(()) => FewsegStatus::Ok,
        Err(status) => status,
    }
}

/// Like `fewseg_segment` but thresholds at `threshold`, writing a 0/255
/// mask.
///
/// # Safety
/// As `fewseg_segment`; `out_mask` must hold at least `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fewseg_segment_mask(
    model: *const FewsegModel,
    supports: *const FewsegSupport,
    n_supports: usize,
    query: *const FewsegImageView,
    threshold: f32,
    out_mask: *mut u8,
    out_len: usize,
) -> FewsegStatus {
    if model.is_null() || out_mask.is_null() {
        return fail(FewsegStatus::NullArgument, "null argument");
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return fail(
            FewsegStatus::InvalidArgument,
            format!("threshold {threshold} outside (0, 1)"),
        );
    }
    let side = (*model).checkpoint.model_config.encoder.input_size;
    let needed = side * side;
    if out_len < needed {
        return fail(
            FewsegStatus::BufferTooSmall,
            format!("output needs {needed} bytes, got {out_len}"),
        );
    }
    let mut probs = vec![0.0f32; needed];
    match run_segment(model, supports, n_supports, query, probs.as_mut_ptr(), needed) {
        Ok(()) => {
            let arr = ndarray::Array2::from_shape_vec((side, side), probs)
                .expect("probs buffer shape");
            match threshold_mask(&arr, f64::from(threshold)) {
                Ok(mask) => {
                    for (i, &v) in mask.iter().enumerate() {
                        *out_mask.add(i) = if v > 0 { 255 } else { 0 };
                    }
                    FewsegStatus::Ok
                }
                Err(err) => fail(FewsegStatus::InvalidArgument, err.to_string()),
            }
        }
        Err(status) => status,
    }
}

/// Validate the dataset rooted at `root`; the error-finding count lands
/// in `out_error_count`, and the full report is written to `csv_path`
/// when that is non-null.
///
/// # Safety
/// `root` must be NUL-terminated; `csv_path` may be null;
/// `out_error_count` may be null.
#[no_mangle]
pub unsafe extern "C" fn fewseg_validate_registry(
    root: *const c_char,
    csv_path: *const c_char,
    out_error_count: *mut u64,
) -> FewsegStatus {
    let root = match path_from(root) {
        Ok(p) => p,
        Err(status) => return status,
    };
    let report = match validate_registry(&root) {
        Ok(r) => r,
        Err(err) => return fail(FewsegStatus::Io, err.to_string()),
    };
    if !csv_path.is_null() {
        let csv_path = match path_from(csv_path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let file = match std::fs::File::create(&csv_path) {
            Ok(f) => f,
            Err(err) => {
                return fail(
                    FewsegStatus::Io,
                    format!("creating {}: {err}", csv_path.display()),
                )
            }
        };
        if let Err(err) = report.write_csv(file) {
            return fail(FewsegStatus::Io, format!("writing report: {err}"));
        }
    }
    if !out_error_count.is_null() {
        *out_error_count = report.n_errors() as u64;
    }
    FewsegStatus::Ok
}

/// Header location helper for build scripts and tests.
pub fn bundled_header_path() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fewseg.h"))
}
