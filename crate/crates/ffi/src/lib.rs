//! C interface to the stfpm detector.
//!
//! Every fallible function returns an [`StfpmStatus`]; on failure a
//! description is available from [`stfpm_last_error`] on the same thread.
//! Detectors are opaque handles created by [`stfpm_detector_open`] and
//! released with [`stfpm_detector_free`]. A detector may be used from
//! several threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use stfpm::archive::TensorArchive;
use stfpm::backbone::{load_teacher, NetworkHandle};
use stfpm::datasets::ImageSource;
use stfpm::metrics::{pro_score, roc_auc, BinaryMask, FprMode, ProOptions};
use stfpm::scorer::{score_images, AnomalyMap, ScoreOptions};
use stfpm::trainer::Checkpoint;
use stfpm::{Error, ErrorClass};

/// Result codes. The numeric values of the error classes match the exit
/// codes of the command-line tool.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StfpmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Invalid configuration, arguments or weights.
    Config = 2,
    /// Malformed input data or mismatched dimensions.
    Data = 3,
    Training = 4,
    /// The metric is undefined for the given labels.
    Metric = 5,
    Io = 6,
    /// The output buffer is smaller than required.
    BufferTooSmall = 7,
    /// An internal error was caught at the boundary.
    Internal = 8,
}

/// A teacher and trained student ready to score images.
pub struct StfpmDetector {
    teacher: NetworkHandle,
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn fail(status: StfpmStatus, message: impl Into<String>) -> StfpmStatus {
    set_error(message.into());
    status
}

fn status_of(e: &Error) -> StfpmStatus {
    match e.class() {
        ErrorClass::Config => StfpmStatus::Config,
        ErrorClass::Data => StfpmStatus::Data,
        ErrorClass::Training => StfpmStatus::Training,
        ErrorClass::Metric => StfpmStatus::Metric,
        ErrorClass::Io => StfpmStatus::Io,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), StfpmStatus>) -> StfpmStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StfpmStatus::Ok,
        Ok(Err(status)) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(StfpmStatus::Internal, format!("internal error: {msg}"))
        }
    }
}

fn lift<T>(r: stfpm::Result<T>) -> Result<T, StfpmStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), StfpmStatus> {
    if p.is_null() {
        Err(fail(StfpmStatus::NullArgument, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, StfpmStatus> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(StfpmStatus::Config, format!("`{name}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stfpm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent failure on this thread, or null when the
/// last call succeeded. Valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn stfpm_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a teacher archive and a student checkpoint trained against it.
///
/// # Safety
/// `teacher_path` and `checkpoint_path` must be NUL-terminated strings and
/// `out` a valid pointer. On success `*out` owns a detector that must be
/// released with [`stfpm_detector_free`].
#[no_mangle]
pub unsafe extern "C" fn stfpm_detector_open(
    teacher_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut StfpmDetector,
) -> StfpmStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = std::ptr::null_mut();
        let teacher_path = path_arg(teacher_path, "teacher_path")?;
        let checkpoint_path = path_arg(checkpoint_path, "checkpoint_path")?;
        let checkpoint = lift(Checkpoint::load(&checkpoint_path))?;
        let mut teacher = lift(TensorArchive::load(&teacher_path).and_then(|a| load_teacher(&a, &checkpoint.pyramid)))?;
        teacher.set_input_size(checkpoint.student.input_size());
        lift(checkpoint.check_teacher(&teacher))?;
        *out = Box::into_raw(Box::new(StfpmDetector { teacher, checkpoint }));
        Ok(())
    })
}

/// Releases a detector. Null is ignored.
///
/// # Safety
/// `detector` must come from [`stfpm_detector_open`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn stfpm_detector_free(detector: *mut StfpmDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Side length of the square anomaly maps this detector produces.
///
/// # Safety
/// `detector` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stfpm_detector_input_size(detector: *const StfpmDetector, out: *mut usize) -> StfpmStatus {
    guard(|| {
        non_null(detector, "detector")?;
        non_null(out, "out")?;
        *out = (*detector).teacher.input_size();
        Ok(())
    })
}

/// Scores one interleaved RGB image of any size. The image is resized to
/// the detector's input size; the anomaly map (row-major, `size * size`
/// values, see [`stfpm_detector_input_size`]) is written to `map_out` when it
/// is non-null, and the image score (the map maximum) to `score_out`.
///
/// # Safety
/// `pixels` must hold `height * row_stride` bytes with `row_stride >= 3 *
/// width`; `map_out`, when non-null, must hold `map_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn stfpm_detector_score_rgb8(
    detector: *const StfpmDetector,
    pixels: *const u8,
    width: u32,
    height: u32,
    row_stride: usize,
    map_out: *mut f64,
    map_len: usize,
    score_out: *mut f64,
) -> StfpmStatus {
    guard(|| {
        non_null(detector, "detector")?;
        non_null(pixels, "pixels")?;
        non_null(score_out, "score_out")?;
        let row = 3 * width as usize;
        if width == 0 || height == 0 || row_stride < row {
            return Err(fail(
                StfpmStatus::Data,
                format!("bad image geometry {width}x{height} with stride {row_stride}"),
            ));
        }
        let src = std::slice::from_raw_parts(pixels, row_stride * height as usize);
        let packed: Vec<u8> = src.chunks(row_stride).flat_map(|r| r[..row].iter().copied()).collect();
        let image = image::RgbImage::from_raw(width, height, packed).expect("buffer sized from geometry");
        let source = ImageSource::Memory {
            id: "buffer".into(),
            image: Arc::new(image),
        };
        let det = &*detector;
        let map = score_source(det, &source, map_out, map_len)?;
        *score_out = map.max_score();
        Ok(())
    })
}

/// Like [`stfpm_detector_score_rgb8`] but reads an image file.
///
/// # Safety
/// `path` must be a NUL-terminated string; pointer rules as in
/// [`stfpm_detector_score_rgb8`].
#[no_mangle]
pub unsafe extern "C" fn stfpm_detector_score_file(
    detector: *const StfpmDetector,
    path: *const c_char,
    map_out: *mut f64,
    map_len: usize,
    score_out: *mut f64,
) -> StfpmStatus {
    guard(|| {
        non_null(detector, "detector")?;
        non_null(score_out, "score_out")?;
        let source = ImageSource::File(path_arg(path, "path")?);
        let map = score_source(&*detector, &source, map_out, map_len)?;
        *score_out = map.max_score();
        Ok(())
    })
}

unsafe fn score_source(
    det: &StfpmDetector,
    source: &ImageSource,
    map_out: *mut f64,
    map_len: usize,
) -> Result<AnomalyMap, StfpmStatus> {
    let size = det.teacher.input_size();
    if !map_out.is_null() && map_len < size * size {
        return Err(fail(
            StfpmStatus::BufferTooSmall,
            format!("map buffer holds {map_len} values, {} needed", size * size),
        ));
    }
    let tensor = lift(source.load(size))?;
    let ckpt = &det.checkpoint;
    let (map, _) = lift(score_images(&det.teacher, &ckpt.student, &[tensor], &ckpt.pyramid, &ScoreOptions::default()))?.remove(0);
    if !map_out.is_null() {
        std::slice::from_raw_parts_mut(map_out, map.scores.len()).copy_from_slice(&map.scores);
    }
    Ok(map)
}

/// Area under the ROC curve of `scores` against binary `labels` (non-zero
/// is positive).
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stfpm_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> StfpmStatus {
    guard(|| {
        non_null(scores, "scores")?;
        non_null(labels, "labels")?;
        non_null(out, "out")?;
        let scores = std::slice::from_raw_parts(scores, n);
        let labels: Vec<bool> = std::slice::from_raw_parts(labels, n).iter().map(|&l| l != 0).collect();
        *out = lift(roc_auc(scores, &labels))?;
        Ok(())
    })
}

/// Normalized area under the PRO curve up to `fpr_limit`, for `count` maps
/// of `width * height` scores with matching 0/1 masks, all row-major and
/// concatenated. `per_image_fpr` non-zero averages false positive rates
/// per image instead of pooling them.
///
/// # Safety
/// `maps` must hold `count * width * height` doubles and `masks` as many
/// bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stfpm_pro_score(
    maps: *const f64,
    masks: *const u8,
    count: usize,
    width: usize,
    height: usize,
    fpr_limit: f64,
    steps: usize,
    per_image_fpr: i32,
    out: *mut f64,
) -> StfpmStatus {
    guard(|| {
        non_null(maps, "maps")?;
        non_null(masks, "masks")?;
        non_null(out, "out")?;
        let hw = width * height;
        let scores = std::slice::from_raw_parts(maps, count * hw);
        let bits = std::slice::from_raw_parts(masks, count * hw);
        let mut anomaly_maps = Vec::with_capacity(count);
        let mut binary = Vec::with_capacity(count);
        for i in 0..count {
            anomaly_maps.push(lift(AnomalyMap::new(width, height, scores[i * hw..(i + 1) * hw].to_vec()))?);
            let data = bits[i * hw..(i + 1) * hw].iter().map(|&b| u8::from(b != 0)).collect();
            binary.push(lift(BinaryMask::new(width, height, data))?);
        }
        let options = ProOptions {
            fpr_limit,
            steps,
            fpr_mode: if per_image_fpr != 0 { FprMode::PerImage } else { FprMode::Pooled },
        };
        *out = lift(pro_score(&anomaly_maps, &binary, &options))?;
        Ok(())
    })
}
