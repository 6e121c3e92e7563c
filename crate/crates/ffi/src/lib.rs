//! C ABI over `cmt-core`.
//!
//! Every fallible entry point returns a [`CmtStatus`]. On failure the message
//! is kept per thread and can be copied out with [`cmt_last_error_message`].
//! Handles are opaque and must be released with their matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cmt_core::detector::{decode, predict, DecodeConfig, DetectorConfig, DetectorParams};
use cmt_core::evaluation::evaluate;
use cmt_core::geometry::BBox;
use cmt_core::numerics::{Tape, Tensor};
use cmt_core::synth_data::io::{load_dataset, write_dataset};
use cmt_core::synth_data::{generate_dataset, Dataset, DatasetConfig, DomainParams, GenConfig};
use cmt_core::trainer::Checkpoint;
use cmt_core::{contrastive, mean_teacher, CmtError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    ConfigInvalid = 6,
    EmptyBatch = 7,
    Numeric = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Which weights of a checkpoint to load.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmtModel {
    Teacher = 0,
    Student = 1,
}

/// One decoded detection in pixel coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CmtDetection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: u32,
    pub score: f64,
}

/// Detector weights plus the architecture they belong to.
pub struct CmtDetector {
    params: DetectorParams,
    config: DetectorConfig,
}

/// A generated or loaded benchmark.
pub struct CmtDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &CmtError) -> CmtStatus {
    match err {
        CmtError::ShapeMismatch(_) => CmtStatus::ShapeMismatch,
        CmtError::NearZeroNorm { .. } | CmtError::Divergence { .. } | CmtError::NotRecording => {
            CmtStatus::Numeric
        }
        CmtError::DegenerateBox { .. } | CmtError::BoxOutsideView => CmtStatus::InvalidArgument,
        CmtError::EmptyBatch => CmtStatus::EmptyBatch,
        CmtError::ConfigInvalid(_) => CmtStatus::ConfigInvalid,
        CmtError::Io { .. } => CmtStatus::Io,
        CmtError::Format { .. } => CmtStatus::Format,
    }
}

struct Fail(CmtStatus, String);

impl From<CmtError> for Fail {
    fn from(e: CmtError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: CmtStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CmtStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            CmtStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        fail(CmtStatus::NullPointer, format!("{what} is null"))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    non_null(p, what)?;
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(
            CmtStatus::InvalidArgument,
            format!("{what} is not valid UTF-8"),
        ),
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `capacity`. Returns the full message
/// length without the terminator; pass a null `buf` to query it.
///
/// # Safety
/// `buf` must be null or valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn cmt_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads one model of a JSON checkpoint written by `cmt train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cmt_detector_load(
    path: *const c_char,
    model: CmtModel,
    out: *mut *mut CmtDetector,
) -> CmtStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        non_null(out, "out")?;
        let ckpt = Checkpoint::load(&path)?;
        let params = match model {
            CmtModel::Teacher => ckpt.teacher,
            CmtModel::Student => ckpt.student,
        };
        *out = Box::into_raw(Box::new(CmtDetector {
            params,
            config: ckpt.config.detector,
        }));
        Ok(())
    })
}

/// Releases a detector. Null is ignored.
///
/// # Safety
/// `det` must be null or a handle from [`cmt_detector_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cmt_detector_free(det: *mut CmtDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Runs the detector on one `[3, height, width]` image with values in
/// [0, 1], decoding with the evaluation thresholds. Up to `capacity`
/// detections are written to `out`; `count` receives the total, so a
/// larger total than `capacity` yields `BufferTooSmall`.
///
/// # Safety
/// `pixels` must hold `3 * height * width` doubles and `out` must be valid
/// for `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn cmt_detector_detect(
    det: *const CmtDetector,
    pixels: *const f64,
    height: usize,
    width: usize,
    out: *mut CmtDetection,
    capacity: usize,
    count: *mut usize,
) -> CmtStatus {
    guard(|| {
        non_null(det, "detector")?;
        non_null(count, "count")?;
        if height == 0 || width == 0 {
            return fail(CmtStatus::InvalidArgument, "image must be non-empty");
        }
        let det = &*det;
        let data = slice_arg(pixels, 3 * height * width, "pixels")?;
        let img = Tensor::new([3, height, width], data.to_vec())?;
        let dets = decode(
            &predict(&img, &det.params, &det.config)?,
            &DecodeConfig::EVAL,
        );
        *count = dets.len();
        if dets.len() > capacity {
            return fail(
                CmtStatus::BufferTooSmall,
                format!("{} detections, capacity {capacity}", dets.len()),
            );
        }
        if !dets.is_empty() {
            non_null(out, "out")?;
        }
        for (i, d) in dets.iter().enumerate() {
            *out.add(i) = CmtDetection {
                x1: d.bbox.x1,
                y1: d.bbox.y1,
                x2: d.bbox.x2,
                y2: d.bbox.y2,
                class_id: d.class_id as u32,
                score: d.score,
            };
        }
        Ok(())
    })
}

/// Generates a benchmark with the default scene generator and the given
/// target-domain degradation.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cmt_dataset_generate(
    seed: u64,
    train_scenes: usize,
    eval_scenes: usize,
    fog_density: f64,
    blur_sigma: f64,
    out: *mut *mut CmtDataset,
) -> CmtStatus {
    guard(|| {
        non_null(out, "out")?;
        let base = GenConfig::default();
        let cfg = DatasetConfig {
            seed,
            train_scenes,
            eval_scenes,
            generator: GenConfig {
                domain: DomainParams {
                    fog_density,
                    blur_sigma,
                    ..base.domain
                },
                ..base
            },
        };
        let inner = generate_dataset(&cfg)?;
        *out = Box::into_raw(Box::new(CmtDataset { inner }));
        Ok(())
    })
}

/// Loads a dataset directory written by `cmt gen-data`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cmt_dataset_load(
    dir: *const c_char,
    out: *mut *mut CmtDataset,
) -> CmtStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        non_null(out, "out")?;
        let inner = load_dataset(&dir)?;
        *out = Box::into_raw(Box::new(CmtDataset { inner }));
        Ok(())
    })
}

/// Writes PNGs, annotations and a manifest under `dir`.
///
/// # Safety
/// `ds` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cmt_dataset_write(ds: *const CmtDataset, dir: *const c_char) -> CmtStatus {
    guard(|| {
        non_null(ds, "dataset")?;
        let dir = path_arg(dir, "dir")?;
        write_dataset(&(*ds).inner, &dir)?;
        Ok(())
    })
}

/// Number of target-domain evaluation images.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmt_dataset_num_eval(ds: *const CmtDataset) -> usize {
    if ds.is_null() {
        0
    } else {
        (*ds).inner.target_eval.images.len()
    }
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cmt_dataset_free(ds: *mut CmtDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// mAP at IoU 0.5 of `det` on the dataset's target evaluation split.
///
/// # Safety
/// Both handles must be live and `map50` valid.
#[no_mangle]
pub unsafe extern "C" fn cmt_evaluate(
    det: *const CmtDetector,
    ds: *const CmtDataset,
    map50: *mut f64,
) -> CmtStatus {
    guard(|| {
        non_null(det, "detector")?;
        non_null(ds, "dataset")?;
        non_null(map50, "map50")?;
        let det = &*det;
        *map50 = evaluate(&det.params, &det.config, &(*ds).inner.target_eval)?.map50;
        Ok(())
    })
}

fn rows(flat: &[f64], n: usize, dim: usize) -> Vec<Tensor> {
    (0..n)
        .map(|i| {
            Tensor::new([dim], flat[i * dim..(i + 1) * dim].to_vec()).expect("row length matches")
        })
        .collect()
}

/// Class-based contrastive loss over `n` student/teacher feature pairs of
/// length `dim`, row-major. Features are used as given.
///
/// # Safety
/// `student` and `teacher` must hold `n * dim` doubles, `classes` `n` values.
#[no_mangle]
pub unsafe extern "C" fn cmt_contrastive_loss(
    student: *const f64,
    teacher: *const f64,
    classes: *const u32,
    n: usize,
    dim: usize,
    tau: f64,
    lambda: f64,
    out: *mut f64,
) -> CmtStatus {
    guard(|| {
        non_null(out, "out")?;
        if dim == 0 || tau <= 0.0 {
            return fail(
                CmtStatus::InvalidArgument,
                "dim must be positive and tau > 0",
            );
        }
        let zs = slice_arg(student, n * dim, "student")?;
        let zt = slice_arg(teacher, n * dim, "teacher")?;
        let classes: Vec<usize> = slice_arg(classes, n, "classes")?
            .iter()
            .map(|&c| c as usize)
            .collect();
        let tape = Tape::no_grad();
        let zs: Vec<_> = rows(zs, n, dim)
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        *out = contrastive::contrastive_loss(&zs, &rows(zt, n, dim), &classes, tau, lambda)?.item();
        Ok(())
    })
}

/// Instance-discrimination loss with in-batch negatives; same layout as
/// [`cmt_contrastive_loss`]. Needs `n >= 2`.
///
/// # Safety
/// `query` and `key` must hold `n * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn cmt_moco_loss(
    query: *const f64,
    key: *const f64,
    n: usize,
    dim: usize,
    tau: f64,
    out: *mut f64,
) -> CmtStatus {
    guard(|| {
        non_null(out, "out")?;
        if dim == 0 || tau <= 0.0 {
            return fail(
                CmtStatus::InvalidArgument,
                "dim must be positive and tau > 0",
            );
        }
        let zq = slice_arg(query, n * dim, "query")?;
        let zk = slice_arg(key, n * dim, "key")?;
        let tape = Tape::no_grad();
        let zq: Vec<_> = rows(zq, n, dim)
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        *out = contrastive::moco_loss(&zq, &rows(zk, n, dim), tau)?.item();
        Ok(())
    })
}

/// IoU of two `[x1, y1, x2, y2]` boxes.
///
/// # Safety
/// `a` and `b` must point to 4 doubles each.
#[no_mangle]
pub unsafe extern "C" fn cmt_iou(a: *const f64, b: *const f64, out: *mut f64) -> CmtStatus {
    guard(|| {
        non_null(out, "out")?;
        let a = slice_arg(a, 4, "a")?;
        let b = slice_arg(b, 4, "b")?;
        let a = BBox::new(a[0], a[1], a[2], a[3]).validate()?;
        let b = BBox::new(b[0], b[1], b[2], b[3]).validate()?;
        *out = cmt_core::evaluation::iou(&a, &b)?;
        Ok(())
    })
}

/// `teacher[i] <- alpha * teacher[i] + (1 - alpha) * student[i]` in place.
///
/// # Safety
/// `teacher` must be valid for `len` writes and `student` for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn cmt_ema_update(
    teacher: *mut f64,
    student: *const f64,
    len: usize,
    alpha: f64,
) -> CmtStatus {
    guard(|| {
        non_null(teacher, "teacher")?;
        let s = slice_arg(student, len, "student")?;
        let mut t = DetectorParams::from_map(
            [(
                "w".to_string(),
                Tensor::new([len], slice_arg(teacher, len, "teacher")?.to_vec())?,
            )]
            .into(),
        );
        let sp =
            DetectorParams::from_map([("w".to_string(), Tensor::new([len], s.to_vec())?)].into());
        mean_teacher::ema_update(&mut t, &sp, alpha)?;
        std::slice::from_raw_parts_mut(teacher, len)
            .copy_from_slice(t.get("w").expect("inserted above").data());
        Ok(())
    })
}
