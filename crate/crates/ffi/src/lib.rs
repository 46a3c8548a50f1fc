//! C interface to mosbench.
//!
//! Handles are opaque and owned by the caller once returned; free each with
//! its `*_free` function. Every fallible call returns an `MbStatus`. On
//! failure, `mb_last_error` gives a message that stays valid until the next
//! failing call on the same thread. Panics never cross the boundary; they are
//! reported as `MB_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mosbench::checkpoint::{load_checkpoint, Predictor};
use mosbench::data::{compute_utterance_mos, load_ratings, RatingTable, SplitTag, UtteranceRecord};
use mosbench::emb::{load_emb1, save_emb1, Frames};
use mosbench::metrics;
use mosbench::model::Example;
use mosbench::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MbStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Config = 6,
    Format = 7,
    NonFinite = 8,
    Undefined = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// A loaded checkpoint.
pub struct MbModel {
    inner: Predictor,
}

/// A frame matrix, as stored in an EMB1 file.
pub struct MbFrames {
    inner: Frames,
}

/// A validated rating table.
pub struct MbRatingTable {
    inner: RatingTable,
    utterances: Vec<UtteranceRecord>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MbStatus {
    match e {
        Error::Io { .. } => MbStatus::Io,
        Error::Parse { .. } => MbStatus::Parse,
        Error::Validation(_) => MbStatus::Validation,
        Error::Config(_) => MbStatus::Config,
        Error::Format(_) => MbStatus::Format,
        Error::NonFinite(_) => MbStatus::NonFinite,
        Error::UndefinedCorrelation(_) | Error::Undefined(_) => MbStatus::Undefined,
    }
}

struct Fail(MbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MbStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MbStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(MbStatus::NullArgument, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MbStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, name: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, n))
}

/// Message of the last failure on this thread, or an empty string.
#[no_mangle]
pub extern "C" fn mb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mb_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mb_model_load(path: *const c_char, out: *mut *mut MbModel) -> MbStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = str_arg(path, "path")?;
        let inner = load_checkpoint(path)?;
        *out = Box::into_raw(Box::new(MbModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `mb_model_load` and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mb_model_free(model: *mut MbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trainable parameter count; 0 for a constant-mean checkpoint.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mb_model_parameter_count(model: *const MbModel, out: *mut usize) -> MbStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = match &(*model).inner {
            Predictor::Network(m) => m.parameter_count(),
            Predictor::ConstantMean { .. } => 0,
        };
        Ok(())
    })
}

/// Length of the one-hot metadata vector the model consumes.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mb_model_metadata_width(model: *const MbModel, out: *mut usize) -> MbStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let p = &(*model).inner;
        *out = p.features().metadata_len(p.vocab());
        Ok(())
    })
}

/// Predicts one utterance. `frames` may be null and `baseline_mos` NaN when
/// the model does not use them. Non-zero `blinded` hides the rater group.
///
/// # Safety
/// String arguments must be NUL-terminated; `frames` null or a valid handle;
/// `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mb_model_predict(
    model: *const MbModel,
    system_id: *const c_char,
    rater_group_id: *const c_char,
    frames: *const MbFrames,
    baseline_mos: f64,
    blinded: c_int,
    out: *mut f64,
) -> MbStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let example = Example {
            record: UtteranceRecord {
                utterance_id: "ffi".into(),
                system_id: str_arg(system_id, "system_id")?.into(),
                rater_group_id: str_arg(rater_group_id, "rater_group_id")?.into(),
                mos: 0.0,
                rating_count: 0,
            },
            frames: (!frames.is_null()).then(|| (*frames).inner.clone()),
            baseline: (!baseline_mos.is_nan()).then_some(baseline_mos),
        };
        let preds = (*model).inner.predict_batch(&[example], blinded != 0)?;
        *out = preds[0].1;
        Ok(())
    })
}

/// Copies `n_frames * dim` frame-major values.
///
/// # Safety
/// `data` must point to `n_frames * dim` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mb_frames_new(
    n_frames: usize,
    dim: usize,
    data: *const f64,
    out: *mut *mut MbFrames,
) -> MbStatus {
    guard(|| {
        non_null(out, "out")?;
        let len = n_frames
            .checked_mul(dim)
            .ok_or_else(|| Fail(MbStatus::Validation, "n_frames * dim overflows".into()))?;
        let values = slice_arg(data, len, "data")?.to_vec();
        let inner = Frames::new(n_frames, dim, values)?;
        *out = Box::into_raw(Box::new(MbFrames { inner }));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mb_emb_read(path: *const c_char, out: *mut *mut MbFrames) -> MbStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = load_emb1(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(MbFrames { inner }));
        Ok(())
    })
}

/// Writes `frames` as EMB1 (values rounded to 32-bit floats).
///
/// # Safety
/// `path` must be NUL-terminated and `frames` a valid handle.
#[no_mangle]
pub unsafe extern "C" fn mb_emb_write(path: *const c_char, frames: *const MbFrames) -> MbStatus {
    guard(|| {
        non_null(frames, "frames")?;
        save_emb1(&(*frames).inner, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `frames` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn mb_frames_n_frames(frames: *const MbFrames) -> usize {
    frames.as_ref().map_or(0, |f| f.inner.n_frames())
}

/// # Safety
/// `frames` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn mb_frames_dim(frames: *const MbFrames) -> usize {
    frames.as_ref().map_or(0, |f| f.inner.dim())
}

/// Copies the frame-major values into `buf`, which holds `len` doubles.
///
/// # Safety
/// `frames` must be valid and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mb_frames_copy(frames: *const MbFrames, buf: *mut f64, len: usize) -> MbStatus {
    guard(|| {
        non_null(frames, "frames")?;
        let data = (*frames).inner.data();
        if len < data.len() {
            return Err(Fail(
                MbStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {}", data.len()),
            ));
        }
        non_null(buf, "buf")?;
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// # Safety
/// `frames` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mb_frames_free(frames: *mut MbFrames) {
    if !frames.is_null() {
        drop(Box::from_raw(frames));
    }
}

/// Loads and validates a ratings CSV.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mb_ratings_load(path: *const c_char, out: *mut *mut MbRatingTable) -> MbStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = load_ratings(str_arg(path, "path")?, SplitTag::Custom)?;
        let utterances = compute_utterance_mos(&inner);
        *out = Box::into_raw(Box::new(MbRatingTable { inner, utterances }));
        Ok(())
    })
}

/// Number of ratings.
///
/// # Safety
/// `table` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn mb_ratings_len(table: *const MbRatingTable) -> usize {
    table.as_ref().map_or(0, |t| t.inner.len())
}

/// Number of distinct utterances.
///
/// # Safety
/// `table` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn mb_ratings_utterance_count(table: *const MbRatingTable) -> usize {
    table.as_ref().map_or(0, |t| t.utterances.len())
}

/// Utterance MOS values in utterance-id order, written to `buf` (`len` doubles).
///
/// # Safety
/// `table` must be valid and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mb_ratings_utterance_mos(
    table: *const MbRatingTable,
    buf: *mut f64,
    len: usize,
) -> MbStatus {
    guard(|| {
        non_null(table, "table")?;
        let utts = &(*table).utterances;
        if len < utts.len() {
            return Err(Fail(
                MbStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {}", utts.len()),
            ));
        }
        non_null(buf, "buf")?;
        for (i, u) in utts.iter().enumerate() {
            *buf.add(i) = u.mos;
        }
        Ok(())
    })
}

/// # Safety
/// `table` must come from `mb_ratings_load` and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mb_ratings_free(table: *mut MbRatingTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Spearman rank correlation with average ranks for ties.
/// Returns `MB_STATUS_UNDEFINED` when either input has no rank variance.
///
/// # Safety
/// `x` and `y` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mb_srcc(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> MbStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = metrics::srcc(slice_arg(x, n, "x")?, slice_arg(y, n, "y")?)?;
        Ok(())
    })
}

/// Mean squared error.
///
/// # Safety
/// `x` and `y` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mb_mse(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> MbStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = metrics::mse(slice_arg(x, n, "x")?, slice_arg(y, n, "y")?)?;
        Ok(())
    })
}
