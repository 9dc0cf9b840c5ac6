//! C ABI over the `ltprompt` library.
//!
//! Objects are opaque handles created by `lt_*_generate`/`lt_*_load`/
//! `lt_train` and released with the matching `lt_*_free`. Every fallible
//! function returns an [`LtStatus`]; on failure a message describing the
//! most recent error on the calling thread is available from
//! [`lt_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ltprompt::data::{ClassGroup, MultiLabelDataset};
use ltprompt::gradcheck::GradCheckOptions;
use ltprompt::synth::{self, SynthConfig};
use ltprompt::{metrics, runner, train, Error, RunConfig, TrainOutcome};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LtStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 1,
    /// Configuration or dataset validation failed.
    Validation = 2,
    /// Non-finite loss or gradient, or a degenerate embedding.
    Numerical = 3,
    /// File system or serialization failure.
    Io = 4,
    /// The requested quantity is undefined (no positives, or an empty class group).
    Undefined = 5,
    /// Output buffer too small.
    BufferTooSmall = 6,
    /// Internal panic; the handle involved should be considered unusable.
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LtGroup {
    Total = 0,
    Head = 1,
    Medium = 2,
    Tail = 3,
}

/// Opaque multi-label dataset.
pub struct LtDataset {
    inner: MultiLabelDataset,
}

/// Opaque result of a training run.
pub struct LtRun {
    outcome: TrainOutcome,
    encoder_seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> LtStatus {
    match err {
        Error::NonFinite(_) | Error::DegenerateEmbedding { .. } => LtStatus::Numerical,
        Error::Io { .. } | Error::Json { .. } | Error::OutputExists(_) => LtStatus::Io,
        Error::UndefinedAp => LtStatus::Undefined,
        _ => LtStatus::Validation,
    }
}

fn fail(status: LtStatus, msg: impl Into<String>) -> LtStatus {
    set_last_error(msg);
    status
}

fn from_error(err: Error) -> LtStatus {
    fail(status_of(&err), err.to_string())
}

/// Runs `f`, converting panics into [`LtStatus::Panic`].
fn guard(f: impl FnOnce() -> LtStatus) -> LtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            fail(LtStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn opt_str<'a>(s: *const c_char) -> Result<Option<&'a str>, LtStatus> {
    if s.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(s)
        .to_str()
        .map(Some)
        .map_err(|_| fail(LtStatus::InvalidArgument, "string argument is not valid UTF-8"))
}

/// # Safety
/// As [`opt_str`]; null is rejected.
unsafe fn req_str<'a>(s: *const c_char, name: &str) -> Result<&'a str, LtStatus> {
    opt_str(s)?.ok_or_else(|| fail(LtStatus::InvalidArgument, format!("{name} is null")))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

macro_rules! tri_core {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(err) => return from_error(err),
        }
    };
}

fn null_arg(name: &str) -> LtStatus {
    fail(LtStatus::InvalidArgument, format!("{name} is null"))
}

/// Message for the most recent failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn lt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn parse_synth(json: Option<&str>) -> Result<SynthConfig, LtStatus> {
    let cfg: SynthConfig = match json {
        None => SynthConfig::default(),
        Some(text) => serde_json::from_str(text).map_err(|e| fail(LtStatus::Validation, format!("synth config: {e}")))?,
    };
    cfg.validate().map_err(from_error)?;
    Ok(cfg)
}

fn box_dataset(ds: MultiLabelDataset, out: *mut *mut LtDataset) -> LtStatus {
    // SAFETY: callers check `out` for null before generating.
    unsafe { *out = Box::into_raw(Box::new(LtDataset { inner: ds })) };
    LtStatus::Ok
}

/// Generates the training split for a synthetic configuration given as a
/// JSON object (null for the defaults).
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lt_dataset_generate(config_json: *const c_char, out: *mut *mut LtDataset) -> LtStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let cfg = tri!(parse_synth(tri!(opt_str(config_json))));
        box_dataset(tri_core!(synth::generate(&cfg)), out)
    })
}

/// Generates `num_samples` held-out samples for the same configuration.
///
/// # Safety
/// As [`lt_dataset_generate`].
#[no_mangle]
pub unsafe extern "C" fn lt_dataset_generate_eval(config_json: *const c_char, num_samples: usize, out: *mut *mut LtDataset) -> LtStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let cfg = tri!(parse_synth(tri!(opt_str(config_json))));
        box_dataset(tri_core!(synth::generate_eval(&cfg, num_samples)), out)
    })
}

/// Loads a dataset snapshot from a JSON file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lt_dataset_load(path: *const c_char, out: *mut *mut LtDataset) -> LtStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let path = tri!(req_str(path, "path"));
        box_dataset(tri_core!(MultiLabelDataset::load(path)), out)
    })
}

/// Writes a dataset snapshot, replacing an existing file.
///
/// # Safety
/// `dataset` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lt_dataset_save(dataset: *const LtDataset, path: *const c_char) -> LtStatus {
    guard(|| {
        let Some(ds) = dataset.as_ref() else {
            return null_arg("dataset");
        };
        let path = tri!(req_str(path, "path"));
        tri_core!(runner::write_file(&PathBuf::from(path), &ds.inner.to_json()));
        LtStatus::Ok
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lt_dataset_free(dataset: *mut LtDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lt_dataset_num_samples(dataset: *const LtDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lt_dataset_num_classes(dataset: *const LtDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.num_classes())
}

/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lt_dataset_dim(dataset: *const LtDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.dim())
}

/// Copies the per-class positive counts into `out[0..len]`; `len` must be
/// at least the number of classes.
///
/// # Safety
/// `dataset` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn lt_dataset_class_counts(dataset: *const LtDataset, out: *mut usize, len: usize) -> LtStatus {
    guard(|| {
        let Some(ds) = dataset.as_ref() else {
            return null_arg("dataset");
        };
        if out.is_null() {
            return null_arg("out");
        }
        let counts = ds.inner.class_counts();
        if len < counts.len() {
            return fail(LtStatus::BufferTooSmall, format!("need {} slots, got {len}", counts.len()));
        }
        std::slice::from_raw_parts_mut(out, counts.len()).copy_from_slice(&counts);
        LtStatus::Ok
    })
}

/// Ranking average precision of `scores` against binary `labels`.
///
/// # Safety
/// `scores` and `labels` must be valid for `len` reads; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lt_average_precision(scores: *const f64, labels: *const u8, len: usize, out: *mut f64) -> LtStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return null_arg("scores, labels or out");
        }
        let s = std::slice::from_raw_parts(scores, len);
        let y = std::slice::from_raw_parts(labels, len);
        if let Some(k) = y.iter().position(|&v| v > 1) {
            return fail(LtStatus::Validation, format!("label {k} is {}, expected 0 or 1", y[k]));
        }
        *out = tri_core!(metrics::average_precision(s, y));
        LtStatus::Ok
    })
}

/// Trains on `train` and evaluates on `eval` with a run configuration
/// given as JSON (null for the defaults). A run that stops on a numerical
/// failure still yields a handle; see [`lt_run_failed`].
///
/// # Safety
/// Dataset pointers must be live handles; `config_json` null or
/// NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lt_train(
    train_set: *const LtDataset,
    eval_set: *const LtDataset,
    config_json: *const c_char,
    out: *mut *mut LtRun,
) -> LtStatus {
    guard(|| {
        let (Some(tr), Some(ev)) = (train_set.as_ref(), eval_set.as_ref()) else {
            return null_arg("train_set or eval_set");
        };
        if out.is_null() {
            return null_arg("out");
        }
        let config = match tri!(opt_str(config_json)) {
            None => RunConfig::default(),
            Some(text) => tri_core!(RunConfig::from_json(text)),
        };
        let outcome = tri_core!(train::train(&tr.inner, &ev.inner, &config));
        *out = Box::into_raw(Box::new(LtRun {
            outcome,
            encoder_seed: config.encoder_seed,
        }));
        LtStatus::Ok
    })
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lt_run_free(run: *mut LtRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Whether the run stopped early on a numerical failure.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lt_run_failed(run: *const LtRun) -> bool {
    run.as_ref().is_some_and(|r| r.outcome.record.failed())
}

/// Number of completed epochs.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lt_run_num_epochs(run: *const LtRun) -> usize {
    run.as_ref().map_or(0, |r| r.outcome.record.history.len())
}

/// Final mAP for a class group, in [0, 1]. [`LtStatus::Undefined`] when
/// the group has no classes or no evaluation was recorded.
///
/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lt_run_final_map(run: *const LtRun, group: LtGroup, out: *mut f64) -> LtStatus {
    guard(|| {
        let Some(r) = run.as_ref() else {
            return null_arg("run");
        };
        if out.is_null() {
            return null_arg("out");
        }
        let Some(eval) = r.outcome.record.final_eval.as_ref() else {
            return fail(LtStatus::Undefined, "run has no evaluation");
        };
        let value = match group {
            LtGroup::Total => Some(eval.map_total),
            LtGroup::Head => eval.group(ClassGroup::Head),
            LtGroup::Medium => eval.group(ClassGroup::Medium),
            LtGroup::Tail => eval.group(ClassGroup::Tail),
        };
        match value {
            Some(v) => {
                *out = v;
                LtStatus::Ok
            }
            None => fail(LtStatus::Undefined, format!("group {group:?} has no evaluable classes")),
        }
    })
}

/// Mean positive-pair caption distance of the training split after
/// `epoch` (0 is before training).
///
/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lt_run_mean_positive_delta(run: *const LtRun, epoch: usize, out: *mut f64) -> LtStatus {
    guard(|| {
        let Some(r) = run.as_ref() else {
            return null_arg("run");
        };
        if out.is_null() {
            return null_arg("out");
        }
        match r.outcome.record.rows().nth(epoch).and_then(|row| row.mean_positive_delta) {
            Some(v) => {
                *out = v;
                LtStatus::Ok
            }
            None => fail(LtStatus::Undefined, format!("no record for epoch {epoch}")),
        }
    })
}

/// Writes the run directory (`config.json`, `metrics.csv`, checkpoint,
/// `run.json`). A non-empty directory is refused unless `force`.
///
/// # Safety
/// `run` must be a live handle; `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lt_run_write(run: *const LtRun, dir: *const c_char, force: bool) -> LtStatus {
    guard(|| {
        let Some(r) = run.as_ref() else {
            return null_arg("run");
        };
        let dir = PathBuf::from(tri!(req_str(dir, "dir")));
        tri_core!(runner::prepare_out_dir(&dir, force));
        tri_core!(runner::write_run_dir(&dir, &r.outcome, r.encoder_seed));
        LtStatus::Ok
    })
}

/// The run record as JSON; release with [`lt_string_free`].
///
/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lt_run_record_json(run: *const LtRun, out: *mut *mut c_char) -> LtStatus {
    guard(|| {
        let Some(r) = run.as_ref() else {
            return null_arg("run");
        };
        if out.is_null() {
            return null_arg("out");
        }
        let json = serde_json::to_string(&r.outcome.record).expect("record serializes");
        match CString::new(json) {
            Ok(s) => {
                *out = s.into_raw();
                LtStatus::Ok
            }
            Err(_) => fail(LtStatus::Io, "record contains a NUL byte"),
        }
    })
}

/// Gradient-checks `count` seeded random loss configurations. Writes the
/// worst relative error and the number of failing trials.
///
/// # Safety
/// `max_rel_error` and `num_failed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lt_gradcheck_trials(seed: u64, count: usize, max_rel_error: *mut f64, num_failed: *mut usize) -> LtStatus {
    guard(|| {
        if max_rel_error.is_null() || num_failed.is_null() {
            return null_arg("max_rel_error or num_failed");
        }
        let trials = tri_core!(runner::random_gradcheck_trials(seed, count, &GradCheckOptions::default()));
        *max_rel_error = trials.iter().map(|t| t.report.max_rel_error).fold(0.0, f64::max);
        *num_failed = trials.iter().filter(|t| !t.report.pass).count();
        LtStatus::Ok
    })
}
