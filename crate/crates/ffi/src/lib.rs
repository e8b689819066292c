//! C ABI over `coevo-core`.
//!
//! Every function returns a [`CoevoStatus`] and writes results through out
//! pointers. On failure, [`coevo_last_error`] returns a message for the
//! calling thread. Handles are opaque and must be released with their
//! matching `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use coevo::config::RunConfig;
use coevo::engine::{Engine, EngineError};
use coevo::memory::{read_log, TrajectoryRecord};
use coevo::metrics::MetricsSnapshot;
use coevo::pareto::{dominates, hypervolume};
use coevo::similarity::{tanimoto, Fingerprinter, NgramFingerprinter, SimilarityStats};
use coevo::synthesis::synthesize;
use coevo::trainer::{dpo_loss, export_dataset};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoevoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    InitFailed = 4,
    LogParse = 5,
    Runtime = 6,
    Panic = 7,
}

/// Similarity statistics: `mu`, population `sigma`, the closed band and the
/// three upper intervals as `[lo, hi]` pairs.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoevoSimilarityStats {
    pub mu: f64,
    pub sigma: f64,
    pub sample_count: usize,
    pub band_lo: f64,
    pub band_hi: f64,
    pub interval_lo: [f64; 3],
    pub interval_hi: [f64; 3],
}

impl From<&SimilarityStats> for CoevoSimilarityStats {
    fn from(s: &SimilarityStats) -> Self {
        CoevoSimilarityStats {
            mu: s.mu,
            sigma: s.sigma,
            sample_count: s.sample_count,
            band_lo: s.filter_band.lo,
            band_hi: s.filter_band.hi,
            interval_lo: s.intervals.map(|i| i.lo),
            interval_hi: s.intervals.map(|i| i.hi),
        }
    }
}

/// One metrics row.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoevoSnapshot {
    pub generation: u32,
    pub evaluations_used: u64,
    pub top_f: [f64; 3],
    pub top_auc: [f64; 3],
    pub uniqueness: f64,
    pub diversity: f64,
    pub validity: f64,
    pub hv_population: f64,
    pub hv_archive: f64,
}

impl From<&MetricsSnapshot> for CoevoSnapshot {
    fn from(s: &MetricsSnapshot) -> Self {
        CoevoSnapshot {
            generation: s.generation,
            evaluations_used: s.evaluations_used,
            top_f: s.top_f,
            top_auc: s.top_auc,
            uniqueness: s.uniqueness,
            diversity: s.diversity,
            validity: s.validity,
            hv_population: s.hv_population,
            hv_archive: s.hv_archive,
        }
    }
}

/// A running search.
pub struct CoevoEngine {
    engine: Engine,
}

/// A trajectory log loaded into memory.
pub struct CoevoLog {
    records: Vec<TrajectoryRecord>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nuls replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(CoevoStatus, String);

fn fail<T>(status: CoevoStatus, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, message.into()))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CoevoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CoevoStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CoevoStatus::Panic
        }
    }
}

unsafe fn out<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| Failure(CoevoStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return fail(CoevoStatus::NullPointer, format!("`{name}` is null"));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn text<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return fail(CoevoStatus::NullPointer, format!("`{name}` is null"));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| Failure(CoevoStatus::InvalidArgument, format!("`{name}` is not UTF-8")))
}

/// Message describing the last failure on this thread; empty after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn coevo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Whether `a` Pareto-dominates `b` (maximization); both have `k` entries.
///
/// # Safety
/// `a` and `b` must point to `k` readable doubles; `out_result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coevo_dominates(a: *const f64, b: *const f64, k: usize, out_result: *mut bool) -> CoevoStatus {
    guard(|| {
        let (a, b) = (slice(a, k, "a")?, slice(b, k, "b")?);
        let r = dominates(a, b).map_err(|e| Failure(CoevoStatus::InvalidArgument, e.to_string()))?;
        *out(out_result, "out_result")? = r;
        Ok(())
    })
}

/// Exact hypervolume of `n` row-major points of dimension `k` above
/// `reference`.
///
/// # Safety
/// `points` must hold `n * k` doubles, `reference` `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn coevo_hypervolume(
    points: *const f64,
    n: usize,
    k: usize,
    reference: *const f64,
    out_value: *mut f64,
) -> CoevoStatus {
    guard(|| {
        let flat = slice(points, n * k, "points")?;
        let reference = slice(reference, k, "reference")?;
        let rows: Vec<Vec<f64>> = flat.chunks(k.max(1)).map(<[f64]>::to_vec).collect();
        let hv = hypervolume(&rows, reference).map_err(|e| Failure(CoevoStatus::InvalidArgument, e.to_string()))?;
        *out(out_value, "out_value")? = hv.value;
        Ok(())
    })
}

/// Preference loss of one pair from policy and reference log-probabilities.
/// Rejected log-probabilities may be `-inf`.
///
/// # Safety
/// `out_loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coevo_dpo_loss(
    policy_chosen: f64,
    policy_rejected: f64,
    ref_chosen: f64,
    ref_rejected: f64,
    beta: f64,
    out_loss: *mut f64,
) -> CoevoStatus {
    guard(|| {
        let loss = dpo_loss(policy_chosen, policy_rejected, ref_chosen, ref_rejected, beta)
            .map_err(|e| Failure(CoevoStatus::InvalidArgument, e.to_string()))?;
        *out(out_loss, "out_loss")? = loss;
        Ok(())
    })
}

/// Statistics of `n` similarity samples.
///
/// # Safety
/// `samples` must hold `n` doubles; `out_stats` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coevo_similarity_stats(
    samples: *const f64,
    n: usize,
    out_stats: *mut CoevoSimilarityStats,
) -> CoevoStatus {
    guard(|| {
        let s = SimilarityStats::from_samples(slice(samples, n, "samples")?)
            .map_err(|e| Failure(CoevoStatus::InvalidArgument, e.to_string()))?;
        *out(out_stats, "out_stats")? = (&s).into();
        Ok(())
    })
}

/// Tanimoto similarity of the n-gram fingerprints of two strings.
///
/// # Safety
/// `a` and `b` must be nul-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn coevo_tanimoto_text(a: *const c_char, b: *const c_char, out_value: *mut f64) -> CoevoStatus {
    guard(|| {
        let fp = |s: &str| NgramFingerprinter.fingerprint(s).map_err(|e| Failure(CoevoStatus::InvalidArgument, e.to_string()));
        let v = tanimoto(&fp(text(a, "a")?)?, &fp(text(b, "b")?)?);
        *out(out_value, "out_value")? = v;
        Ok(())
    })
}

fn engine_failure(e: EngineError) -> Failure {
    let status = match e {
        EngineError::Config(_) => CoevoStatus::Config,
        EngineError::InitFailed(_) => CoevoStatus::InitFailed,
        _ => CoevoStatus::Runtime,
    };
    Failure(status, e.to_string())
}

/// Loads a run config and initializes the population. `out_dir` may be null
/// to keep everything in memory.
///
/// # Safety
/// `config_path` must be nul-terminated UTF-8, `out_dir` null or the same;
/// `out_engine` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coevo_engine_new_from_config(
    config_path: *const c_char,
    out_dir: *const c_char,
    out_engine: *mut *mut CoevoEngine,
) -> CoevoStatus {
    guard(|| {
        let slot = out(out_engine, "out_engine")?;
        *slot = std::ptr::null_mut();
        let config = RunConfig::load(Path::new(text(config_path, "config_path")?), &[])
            .map_err(|e| Failure(CoevoStatus::Config, e.to_string()))?;
        let dir = if out_dir.is_null() { None } else { Some(PathBuf::from(text(out_dir, "out_dir")?)) };
        let engine = Engine::new(config, dir.as_deref()).map_err(engine_failure)?;
        *slot = Box::into_raw(Box::new(CoevoEngine { engine }));
        Ok(())
    })
}

/// Runs one generation. `out_advanced` is false once the budget is spent, in
/// which case `out_snapshot` is left untouched.
///
/// # Safety
/// `engine` must come from [`coevo_engine_new_from_config`] and not be freed.
#[no_mangle]
pub unsafe extern "C" fn coevo_engine_step(
    engine: *mut CoevoEngine,
    out_snapshot: *mut CoevoSnapshot,
    out_advanced: *mut bool,
) -> CoevoStatus {
    guard(|| {
        let e = out(engine, "engine")?;
        let advanced = out(out_advanced, "out_advanced")?;
        match e.engine.step().map_err(engine_failure)? {
            Some(s) => {
                *out(out_snapshot, "out_snapshot")? = (&s).into();
                *advanced = true;
            }
            None => *advanced = false,
        }
        Ok(())
    })
}

/// Runs the remaining generations and writes the artifacts.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn coevo_engine_finish(engine: *mut CoevoEngine) -> CoevoStatus {
    guard(|| {
        let e = out(engine, "engine")?;
        e.engine.run_to_end().map_err(engine_failure)?;
        e.engine.write_artifacts().map_err(engine_failure)
    })
}

/// Releases an engine handle; null is ignored.
///
/// # Safety
/// `engine` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coevo_engine_free(engine: *mut CoevoEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Reads and validates a trajectory log.
///
/// # Safety
/// `path` must be nul-terminated UTF-8; `out_log` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coevo_log_open(path: *const c_char, out_log: *mut *mut CoevoLog) -> CoevoStatus {
    guard(|| {
        let slot = out(out_log, "out_log")?;
        *slot = std::ptr::null_mut();
        let records = read_log(text(path, "path")?).map_err(|e| Failure(CoevoStatus::LogParse, e.to_string()))?;
        *slot = Box::into_raw(Box::new(CoevoLog { records }));
        Ok(())
    })
}

/// Number of records in the log, the init record included.
///
/// # Safety
/// `log` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn coevo_log_len(log: *const CoevoLog, out_len: *mut usize) -> CoevoStatus {
    guard(|| {
        let l = log.as_ref().ok_or_else(|| Failure(CoevoStatus::NullPointer, "`log` is null".into()))?;
        *out(out_len, "out_len")? = l.records.len();
        Ok(())
    })
}

/// Synthesizes preference pairs from the last `window` prompts and writes
/// them as JSON lines to `dataset_path` (an empty file when none qualify).
///
/// # Safety
/// `log` must be a live handle; `dataset_path` nul-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn coevo_log_synthesize(
    log: *const CoevoLog,
    window: usize,
    alpha: f64,
    pairs_per_prompt: usize,
    dataset_path: *const c_char,
    out_count: *mut usize,
) -> CoevoStatus {
    guard(|| {
        let l = log.as_ref().ok_or_else(|| Failure(CoevoStatus::NullPointer, "`log` is null".into()))?;
        let path = text(dataset_path, "dataset_path")?;
        let result = synthesize(&l.records, window, alpha, pairs_per_prompt)
            .map_err(|e| Failure(CoevoStatus::InvalidArgument, e.to_string()))?;
        if result.triplets.is_empty() {
            std::fs::write(path, "").map_err(|e| Failure(CoevoStatus::Runtime, e.to_string()))?;
        } else {
            export_dataset(&result.triplets, path).map_err(|e| Failure(CoevoStatus::Runtime, e.to_string()))?;
        }
        *out(out_count, "out_count")? = result.triplets.len();
        Ok(())
    })
}

/// Releases a log handle; null is ignored.
///
/// # Safety
/// `log` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coevo_log_free(log: *mut CoevoLog) {
    if !log.is_null() {
        drop(Box::from_raw(log));
    }
}
