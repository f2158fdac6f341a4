//! C ABI over the segmentation pipeline engine.
//!
//! Conventions:
//! - Every fallible call returns an `sp_status`; `SP_OK` is zero.
//! - On failure, a thread-local message is set; read it with
//!   [`sp_last_error_message`]. The pointer stays valid until the next
//!   failing call on the same thread.
//! - Objects are opaque handles created by `sp_*_new`/`sp_*_read` calls and
//!   released with the matching `sp_*_free`. Freeing NULL is a no-op.
//! - Panics never unwind across the boundary; they surface as `SP_PANIC`.

#![allow(non_camel_case_types)]
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::{c_char, c_double, c_float, c_int, size_t};

use segplan::cv::{run_cv, CvOptions};
use segplan::descriptor::DatasetDescriptor;
use segplan::error::Error;
use segplan::fingerprint::{fingerprint_dataset, DatasetFingerprint};
use segplan::inference::dice_score;
use segplan::planner::{make_plan, ModelId, PipelinePlan};
use segplan::postprocess::apply_postprocessing;
use segplan::predictors::PredictorKind;
use segplan::preprocess::preprocess_dataset;
use segplan::volume::{Volume, VolumeKind};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum sp_status {
    /// Success.
    SP_OK = 0,
    /// Invalid inputs or state (mirrors process exit code 2).
    SP_VALIDATION_ERROR = 2,
    /// Filesystem or serialization failure (mirrors process exit code 3).
    SP_IO_ERROR = 3,
    /// A required pointer argument was NULL.
    SP_NULL_ARGUMENT = 4,
    /// An internal panic was caught at the boundary.
    SP_PANIC = 5,
}

/// Payload interpretation of a volume.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum sp_volume_kind {
    SP_VOLUME_IMAGE = 0,
    SP_VOLUME_LABELMAP = 1,
    SP_VOLUME_SOFTMAX = 2,
}

/// Opaque handle to a voxel volume (image, labelmap, or softmax).
pub struct sp_volume {
    inner: Volume,
}

/// Opaque handle to a dataset fingerprint.
pub struct sp_fingerprint {
    inner: DatasetFingerprint,
}

/// Opaque handle to a self-configured pipeline plan.
pub struct sp_plan {
    inner: PipelinePlan,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> =
        RefCell::new(CString::new("").expect("empty string has no NUL"));
}

fn set_last_error(msg: impl Into<String>) {
    let mut msg = msg.into();
    msg.retain(|c| c != '\0');
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(msg).expect("NUL bytes stripped");
    });
}

fn status_of(err: &Error) -> sp_status {
    set_last_error(err.to_string());
    match err.exit_code() {
        2 => sp_status::SP_VALIDATION_ERROR,
        _ => sp_status::SP_IO_ERROR,
    }
}

fn null_arg(what: &str) -> sp_status {
    set_last_error(format!("{what} must not be NULL"));
    sp_status::SP_NULL_ARGUMENT
}

fn guard(f: impl FnOnce() -> sp_status) -> sp_status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(format!("internal panic: {msg}"));
            sp_status::SP_PANIC
        }
    }
}

/// # Safety
/// `ptr` must be NULL or a valid NUL-terminated string.
unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, sp_status> {
    if ptr.is_null() {
        return Err(null_arg(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error(format!("{what} is not valid UTF-8"));
        sp_status::SP_VALIDATION_ERROR
    })
}

unsafe fn slice_arg<'a, T>(
    ptr: *const T,
    len: size_t,
    what: &str,
) -> Result<&'a [T], sp_status> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null_arg(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

fn emit<T>(out: *mut *mut T, value: T) -> sp_status {
    if out.is_null() {
        return null_arg("out");
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    sp_status::SP_OK
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, sp_status> {
    ptr.as_ref().ok_or_else(|| null_arg(what))
}

/// Version string of the library (static storage).
#[no_mangle]
pub extern "C" fn sp_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread ("" if none).
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Volumes
// ---------------------------------------------------------------------------

/// Read a volume from an .mvox file.
#[no_mangle]
pub unsafe extern "C" fn sp_volume_read(
    path: *const c_char,
    out: *mut *mut sp_volume,
) -> sp_status {
    guard(|| {
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Volume::read_mvox(Path::new(path)) {
            Ok(inner) => emit(out, sp_volume { inner }),
            Err(e) => status_of(&e),
        }
    })
}

/// Write a volume to an .mvox file.
#[no_mangle]
pub unsafe extern "C" fn sp_volume_write(
    vol: *const sp_volume,
    path: *const c_char,
) -> sp_status {
    guard(|| {
        let vol = match handle(vol, "vol") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match vol.inner.write_mvox(Path::new(path)) {
            Ok(()) => sp_status::SP_OK,
            Err(e) => status_of(&e),
        }
    })
}

/// Create a multi-channel image volume from row-major `[channel][voxel]`
/// data. `shape`/`spacing` have `ndim` entries; `data_len` must equal
/// `channels * product(shape)`.
#[no_mangle]
pub unsafe extern "C" fn sp_volume_new_image(
    channels: size_t,
    shape: *const size_t,
    spacing: *const c_double,
    ndim: size_t,
    data: *const c_float,
    data_len: size_t,
    out: *mut *mut sp_volume,
) -> sp_status {
    guard(|| {
        let shape = match slice_arg(shape, ndim, "shape") {
            Ok(s) => s.to_vec(),
            Err(s) => return s,
        };
        let spacing = match slice_arg(spacing, ndim, "spacing") {
            Ok(s) => s.to_vec(),
            Err(s) => return s,
        };
        let data = match slice_arg(data, data_len, "data") {
            Ok(d) => d.to_vec(),
            Err(s) => return s,
        };
        match Volume::new_image(channels, shape, spacing, data) {
            Ok(inner) => emit(out, sp_volume { inner }),
            Err(e) => status_of(&e),
        }
    })
}

/// Create a labelmap volume. `data_len` must equal `product(shape)`.
#[no_mangle]
pub unsafe extern "C" fn sp_volume_new_labelmap(
    shape: *const size_t,
    spacing: *const c_double,
    ndim: size_t,
    data: *const u8,
    data_len: size_t,
    out: *mut *mut sp_volume,
) -> sp_status {
    guard(|| {
        let shape = match slice_arg(shape, ndim, "shape") {
            Ok(s) => s.to_vec(),
            Err(s) => return s,
        };
        let spacing = match slice_arg(spacing, ndim, "spacing") {
            Ok(s) => s.to_vec(),
            Err(s) => return s,
        };
        let data = match slice_arg(data, data_len, "data") {
            Ok(d) => d.to_vec(),
            Err(s) => return s,
        };
        match Volume::new_labelmap(shape, spacing, data) {
            Ok(inner) => emit(out, sp_volume { inner }),
            Err(e) => status_of(&e),
        }
    })
}

/// Release a volume handle. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sp_volume_free(vol: *mut sp_volume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Number of spatial axes (0 if `vol` is NULL).
#[no_mangle]
pub unsafe extern "C" fn sp_volume_ndim(vol: *const sp_volume) -> size_t {
    vol.as_ref().map_or(0, |v| v.inner.ndim())
}

/// Number of channels (0 if `vol` is NULL).
#[no_mangle]
pub unsafe extern "C" fn sp_volume_channels(vol: *const sp_volume) -> size_t {
    vol.as_ref().map_or(0, |v| v.inner.num_channels())
}

/// Payload kind. NULL maps to `SP_VOLUME_IMAGE`; check for NULL first.
#[no_mangle]
pub unsafe extern "C" fn sp_volume_kind_of(vol: *const sp_volume) -> sp_volume_kind {
    match vol.as_ref().map(|v| v.inner.kind()) {
        Some(VolumeKind::Labelmap) => sp_volume_kind::SP_VOLUME_LABELMAP,
        Some(VolumeKind::Softmax) => sp_volume_kind::SP_VOLUME_SOFTMAX,
        _ => sp_volume_kind::SP_VOLUME_IMAGE,
    }
}

/// Copy the spatial shape into `out` (capacity `cap`); returns the number
/// of axes written.
#[no_mangle]
pub unsafe extern "C" fn sp_volume_shape(
    vol: *const sp_volume,
    out: *mut size_t,
    cap: size_t,
) -> size_t {
    let Some(vol) = vol.as_ref() else { return 0 };
    if out.is_null() {
        return 0;
    }
    let shape = vol.inner.shape();
    let n = shape.len().min(cap);
    for (i, &d) in shape.iter().take(n).enumerate() {
        *out.add(i) = d;
    }
    n
}

/// Copy the per-axis spacing into `out` (capacity `cap`); returns the
/// number of axes written.
#[no_mangle]
pub unsafe extern "C" fn sp_volume_spacing(
    vol: *const sp_volume,
    out: *mut c_double,
    cap: size_t,
) -> size_t {
    let Some(vol) = vol.as_ref() else { return 0 };
    if out.is_null() {
        return 0;
    }
    let spacing = vol.inner.spacing();
    let n = spacing.len().min(cap);
    for (i, &s) in spacing.iter().take(n).enumerate() {
        *out.add(i) = s;
    }
    n
}

/// Copy float payload (image/softmax volumes) into `out`.
/// `cap` must be at least `channels * product(shape)`.
#[no_mangle]
pub unsafe extern "C" fn sp_volume_copy_f32(
    vol: *const sp_volume,
    out: *mut c_float,
    cap: size_t,
) -> sp_status {
    guard(|| {
        let vol = match handle(vol, "vol") {
            Ok(v) => v,
            Err(s) => return s,
        };
        if vol.inner.kind() == VolumeKind::Labelmap {
            set_last_error("labelmap volumes hold u8 data; use sp_volume_copy_u8");
            return sp_status::SP_VALIDATION_ERROR;
        }
        let data = vol.inner.as_f32();
        if out.is_null() {
            return null_arg("out");
        }
        if cap < data.len() {
            set_last_error(format!(
                "buffer too small: need {} floats, got {cap}",
                data.len()
            ));
            return sp_status::SP_VALIDATION_ERROR;
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        sp_status::SP_OK
    })
}

/// Copy label payload (labelmap volumes) into `out`.
/// `cap` must be at least `product(shape)`.
#[no_mangle]
pub unsafe extern "C" fn sp_volume_copy_u8(
    vol: *const sp_volume,
    out: *mut u8,
    cap: size_t,
) -> sp_status {
    guard(|| {
        let vol = match handle(vol, "vol") {
            Ok(v) => v,
            Err(s) => return s,
        };
        if vol.inner.kind() != VolumeKind::Labelmap {
            set_last_error("only labelmap volumes hold u8 data; use sp_volume_copy_f32");
            return sp_status::SP_VALIDATION_ERROR;
        }
        let data = vol.inner.as_u8();
        if out.is_null() {
            return null_arg("out");
        }
        if cap < data.len() {
            set_last_error(format!(
                "buffer too small: need {} bytes, got {cap}",
                data.len()
            ));
            return sp_status::SP_VALIDATION_ERROR;
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        sp_status::SP_OK
    })
}

// ---------------------------------------------------------------------------
// Fingerprint and plan
// ---------------------------------------------------------------------------

/// Scan a dataset directory (with dataset.json) into a fingerprint.
#[no_mangle]
pub unsafe extern "C" fn sp_fingerprint_dataset(
    dataset_dir: *const c_char,
    out: *mut *mut sp_fingerprint,
) -> sp_status {
    guard(|| {
        let dir = match utf8_arg(dataset_dir, "dataset_dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let result = DatasetDescriptor::read(Path::new(dir)).and_then(|d| fingerprint_dataset(&d));
        match result {
            Ok(inner) => emit(out, sp_fingerprint { inner }),
            Err(e) => status_of(&e),
        }
    })
}

/// Read a fingerprint JSON file.
#[no_mangle]
pub unsafe extern "C" fn sp_fingerprint_read(
    path: *const c_char,
    out: *mut *mut sp_fingerprint,
) -> sp_status {
    guard(|| {
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match DatasetFingerprint::read_json(Path::new(path)) {
            Ok(inner) => emit(out, sp_fingerprint { inner }),
            Err(e) => status_of(&e),
        }
    })
}

/// Write a fingerprint to a canonical JSON file.
#[no_mangle]
pub unsafe extern "C" fn sp_fingerprint_write(
    fp: *const sp_fingerprint,
    path: *const c_char,
) -> sp_status {
    guard(|| {
        let fp = match handle(fp, "fp") {
            Ok(f) => f,
            Err(s) => return s,
        };
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match fp.inner.write_json(Path::new(path)) {
            Ok(()) => sp_status::SP_OK,
            Err(e) => status_of(&e),
        }
    })
}

/// Release a fingerprint handle. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sp_fingerprint_free(fp: *mut sp_fingerprint) {
    if !fp.is_null() {
        drop(Box::from_raw(fp));
    }
}

/// Derive the full pipeline plan from a fingerprint.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_from_fingerprint(
    fp: *const sp_fingerprint,
    out: *mut *mut sp_plan,
) -> sp_status {
    guard(|| {
        let fp = match handle(fp, "fp") {
            Ok(f) => f,
            Err(s) => return s,
        };
        match make_plan(&fp.inner) {
            Ok(inner) => emit(out, sp_plan { inner }),
            Err(e) => status_of(&e),
        }
    })
}

/// Read a plan JSON file.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_read(path: *const c_char, out: *mut *mut sp_plan) -> sp_status {
    guard(|| {
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match PipelinePlan::read_json(Path::new(path)) {
            Ok(inner) => emit(out, sp_plan { inner }),
            Err(e) => status_of(&e),
        }
    })
}

/// Write a plan to a JSON file.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_write(plan: *const sp_plan, path: *const c_char) -> sp_status {
    guard(|| {
        let plan = match handle(plan, "plan") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match plan.inner.write_json(Path::new(path)) {
            Ok(()) => sp_status::SP_OK,
            Err(e) => status_of(&e),
        }
    })
}

/// Release a plan handle. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_free(plan: *mut sp_plan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// 1 when the plan includes the two-stage (coarse-to-fine) model, else 0.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_has_cascade(plan: *const sp_plan) -> c_int {
    plan.as_ref()
        .is_some_and(|p| p.inner.models.contains(&ModelId::Cascade))
        .into()
}

/// Number of models the plan trains.
#[no_mangle]
pub unsafe extern "C" fn sp_plan_num_models(plan: *const sp_plan) -> size_t {
    plan.as_ref().map_or(0, |p| p.inner.models.len())
}

// ---------------------------------------------------------------------------
// Pipeline operations
// ---------------------------------------------------------------------------

/// Crop, resample, and normalize every training case into `out_dir`.
/// `fingerprint_path` may be NULL to re-scan the dataset.
#[no_mangle]
pub unsafe extern "C" fn sp_preprocess_dataset(
    dataset_dir: *const c_char,
    plan_path: *const c_char,
    fingerprint_path: *const c_char,
    out_dir: *const c_char,
) -> sp_status {
    guard(|| {
        let dataset_dir = match utf8_arg(dataset_dir, "dataset_dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let plan_path = match utf8_arg(plan_path, "plan_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let out_dir = match utf8_arg(out_dir, "out_dir") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let result = (|| {
            let desc = DatasetDescriptor::read(Path::new(dataset_dir))?;
            let plan = PipelinePlan::read_json(Path::new(plan_path))?;
            let fp = if fingerprint_path.is_null() {
                fingerprint_dataset(&desc)?
            } else {
                let path = CStr::from_ptr(fingerprint_path).to_str().map_err(|_| {
                    Error::validation("fingerprint_path is not valid UTF-8")
                })?;
                DatasetFingerprint::read_json(Path::new(path))?
            };
            preprocess_dataset(&desc, &fp, &plan, Path::new(out_dir))?;
            Ok(())
        })();
        match result {
            Ok(()) => sp_status::SP_OK,
            Err(e) => status_of(&e),
        }
    })
}

/// Run the five-fold cross-validation protocol. `predictor` is one of
/// "oracle", "constant", "threshold". Booleans are 0/nonzero.
#[no_mangle]
pub unsafe extern "C" fn sp_run_cv(
    dataset_dir: *const c_char,
    preprocessed_dir: *const c_char,
    plan_path: *const c_char,
    out_dir: *const c_char,
    seed: u64,
    predictor: *const c_char,
    use_tta: c_int,
    simulate_scheduler: c_int,
) -> sp_status {
    guard(|| {
        let dataset_dir = match utf8_arg(dataset_dir, "dataset_dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let preprocessed_dir = match utf8_arg(preprocessed_dir, "preprocessed_dir") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let plan_path = match utf8_arg(plan_path, "plan_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let out_dir = match utf8_arg(out_dir, "out_dir") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let predictor = match utf8_arg(predictor, "predictor") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let kind: PredictorKind = match predictor.parse() {
            Ok(k) => k,
            Err(e) => return status_of(&e),
        };
        let options = CvOptions {
            seed,
            predictor: kind,
            tta: use_tta != 0,
            simulate_scheduler: simulate_scheduler != 0,
        };
        match run_cv(
            Path::new(dataset_dir),
            Path::new(preprocessed_dir),
            Path::new(plan_path),
            Path::new(out_dir),
            &options,
        ) {
            Ok(_) => sp_status::SP_OK,
            Err(e) => status_of(&e),
        }
    })
}

/// Largest-component filtering of a labelmap for the given classes.
#[no_mangle]
pub unsafe extern "C" fn sp_postprocess(
    pred: *const sp_volume,
    classes: *const u8,
    num_classes: size_t,
    out: *mut *mut sp_volume,
) -> sp_status {
    guard(|| {
        let pred = match handle(pred, "pred") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let classes = match slice_arg(classes, num_classes, "classes") {
            Ok(c) => c,
            Err(s) => return s,
        };
        match apply_postprocessing(&pred.inner, classes) {
            Ok(inner) => emit(out, sp_volume { inner }),
            Err(e) => status_of(&e),
        }
    })
}

/// Dice overlap of one class between two labelmaps (1.0 when both empty).
#[no_mangle]
pub unsafe extern "C" fn sp_dice(
    a: *const sp_volume,
    b: *const sp_volume,
    class_id: u8,
    out: *mut c_double,
) -> sp_status {
    guard(|| {
        let a = match handle(a, "a") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let b = match handle(b, "b") {
            Ok(v) => v,
            Err(s) => return s,
        };
        if out.is_null() {
            return null_arg("out");
        }
        match dice_score(&a.inner, &b.inner, class_id) {
            Ok(d) => {
                *out = d;
                sp_status::SP_OK
            }
            Err(e) => status_of(&e),
        }
    })
}
