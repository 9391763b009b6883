//! C ABI over the training-pipeline engine.
//!
//! Conventions, enforced at every entry point:
//!
//! - The engine is an opaque handle created by [`iqarl_engine_new`] or
//!   [`iqarl_engine_from_file`] and released by [`iqarl_engine_free`].
//! - Fallible functions return an `int32_t` status: `IQARL_OK` (0) on
//!   success, otherwise an `IQARL_ERR_*` code. Results travel through `out`
//!   pointers, which are written only on success.
//! - Functions returning pointers yield null on failure. After any failure
//!   [`iqarl_last_error_message`] returns a human-readable description.
//! - Strings returned to the caller are NUL-terminated, UTF-8, and owned by
//!   the caller: release them with [`iqarl_string_free`]. Never free them
//!   with `free(3)`.
//! - Every boundary catches panics and converts them to `IQARL_ERR_PANIC`;
//!   Rust unwinding never crosses into C frames.
//!
//! Bulk payloads (rollouts, curation records, run reports) cross the
//! boundary as JSON strings in the same shapes the `iqa-rl` CLI reads and
//! writes, so the two front ends are interchangeable.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use iqa_rl::curation::{CurationSummary, FilterOutcome, RawPairRecord};
use iqa_rl::hints::compute_hints;
use iqa_rl::metrics::{plcc, srcc, unique_score_ratio};
use iqa_rl::response::{format_reward, parse_response};
use iqa_rl::reward::score_reward;
use iqa_rl::rollout::{read_rollouts, step_report, write_rollouts, RolloutError};
use iqa_rl::sim::{run_experiment, RunConfig};
use iqa_rl::EngineConfig;

/// Success.
pub const IQARL_OK: i32 = 0;
/// Malformed or semantically invalid input.
pub const IQARL_ERR_VALIDATION: i32 = 1;
/// Filesystem failure.
pub const IQARL_ERR_IO: i32 = 2;
/// A required pointer argument was null.
pub const IQARL_ERR_NULL_POINTER: i32 = 3;
/// A string argument was not valid UTF-8.
pub const IQARL_ERR_UTF8: i32 = 4;
/// An internal panic was caught at the boundary.
pub const IQARL_ERR_PANIC: i32 = 5;

/// Opaque engine handle holding the validated configuration.
pub struct IqarlEngine {
    cfg: EngineConfig,
}

/// The four computed image descriptors, all finite on success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IqarlHints {
    /// Mean luma, normalized to `[0, 1]`.
    pub brightness: f64,
    /// Luma standard deviation, normalized to `[0, 1]`.
    pub contrast: f64,
    /// Opponent-color colorfulness, normalized by 255.
    pub colorfulness: f64,
    /// Variance of the Laplacian over interior pixels, in squared luma.
    pub sharpness: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(code: i32, message: &str) -> i32 {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul bytes stripped");
    });
    code
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::default());
}

/// Runs `body` with panics converted to `IQARL_ERR_PANIC`, clearing the
/// error slot first so stale messages never survive a successful call.
fn guarded(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(|| {
        clear_error();
        body()
    })) {
        Ok(code) => code,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic of unknown type".to_string());
            set_error(IQARL_ERR_PANIC, &msg)
        }
    }
}

/// As [`guarded`], for functions returning pointers: null signals failure.
fn guarded_ptr<T>(body: impl FnOnce() -> *mut T) -> *mut T {
    match catch_unwind(AssertUnwindSafe(|| {
        clear_error();
        body()
    })) {
        Ok(ptr) => ptr,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic of unknown type".to_string());
            set_error(IQARL_ERR_PANIC, &msg);
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `text` must be null or point to a NUL-terminated string.
unsafe fn read_str<'a>(text: *const c_char) -> Result<&'a str, i32> {
    if text.is_null() {
        return Err(set_error(IQARL_ERR_NULL_POINTER, "string argument is null"));
    }
    CStr::from_ptr(text)
        .to_str()
        .map_err(|e| set_error(IQARL_ERR_UTF8, &format!("invalid UTF-8: {e}")))
}

fn into_out_string(text: String, out: *mut *mut c_char) -> Result<(), i32> {
    if out.is_null() {
        return Err(set_error(IQARL_ERR_NULL_POINTER, "output pointer is null"));
    }
    let c = CString::new(text.replace('\0', " ")).expect("nul bytes stripped");
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn rollout_error_code(e: &RolloutError) -> i32 {
    match e {
        RolloutError::Io(_) => IQARL_ERR_IO,
        _ => IQARL_ERR_VALIDATION,
    }
}

// ---------------------------------------------------------------------------
// Engine lifecycle
// ---------------------------------------------------------------------------

/// Creates an engine with the built-in default configuration.
///
/// Returns null only if an internal panic occurs. Release the handle with
/// [`iqarl_engine_free`].
#[no_mangle]
pub extern "C" fn iqarl_engine_new() -> *mut IqarlEngine {
    guarded_ptr(|| {
        Box::into_raw(Box::new(IqarlEngine {
            cfg: EngineConfig::default(),
        }))
    })
}

/// Creates an engine from a `key = value` configuration file.
///
/// Returns null on failure; [`iqarl_last_error_message`] describes why.
///
/// # Safety
/// `path` must be null or point to a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn iqarl_engine_from_file(path: *const c_char) -> *mut IqarlEngine {
    guarded_ptr(|| {
        let path = match unsafe { read_str(path) } {
            Ok(p) => p,
            Err(_) => return std::ptr::null_mut(),
        };
        match EngineConfig::from_config_file(std::path::Path::new(path)) {
            Ok(cfg) => Box::into_raw(Box::new(IqarlEngine { cfg })),
            Err(e) => {
                let code = if e.kind() == std::io::ErrorKind::InvalidData {
                    IQARL_ERR_VALIDATION
                } else {
                    IQARL_ERR_IO
                };
                set_error(code, &format!("{path}: {e}"));
                std::ptr::null_mut()
            }
        }
    })
}

/// Releases an engine handle. Null is a no-op. The handle must not be used
/// afterwards.
///
/// # Safety
/// `engine` must be null or a pointer returned by an `iqarl_engine_*`
/// constructor that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn iqarl_engine_free(engine: *mut IqarlEngine) {
    if !engine.is_null() {
        drop(unsafe { Box::from_raw(engine) });
    }
}

/// Returns the message of the most recent failure on this thread as a
/// caller-owned string (empty if the last call succeeded). Release it with
/// [`iqarl_string_free`].
#[no_mangle]
pub extern "C" fn iqarl_last_error_message() -> *mut c_char {
    match catch_unwind(|| LAST_ERROR.with(|slot| slot.borrow().clone())) {
        Ok(msg) => msg.into_raw(),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `text` must be null or a pointer obtained from this library that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn iqarl_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(unsafe { CString::from_raw(text) });
    }
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// Parses one response text and writes its binary format reward (exactly
/// 0.0 or 1.0) to `out_reward`.
///
/// `turn_index` is 1-based; `width`/`height` describe the image the turn
/// saw. Unparseable text is not an error: it scores 0.
///
/// # Safety
/// `text` must be null or NUL-terminated; `out_reward` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn iqarl_format_reward(
    text: *const c_char,
    width: u32,
    height: u32,
    turn_index: usize,
    out_reward: *mut f64,
) -> i32 {
    guarded(|| {
        let text = match unsafe { read_str(text) } {
            Ok(t) => t,
            Err(code) => return code,
        };
        if out_reward.is_null() {
            return set_error(IQARL_ERR_NULL_POINTER, "out_reward is null");
        }
        let reward = format_reward(&parse_response(text, (width, height), turn_index));
        unsafe { *out_reward = reward };
        IQARL_OK
    })
}

/// Writes the Gaussian score-closeness reward for a predicted rating against
/// the ground truth, using the engine's bandwidth.
///
/// # Safety
/// `engine` must be a live engine handle; `out_reward` must be writable.
#[no_mangle]
pub unsafe extern "C" fn iqarl_score_reward(
    engine: *const IqarlEngine,
    r_pred: f64,
    r_gt: f64,
    out_reward: *mut f64,
) -> i32 {
    guarded(|| {
        let Some(engine) = (unsafe { engine.as_ref() }) else {
            return set_error(IQARL_ERR_NULL_POINTER, "engine is null");
        };
        if out_reward.is_null() {
            return set_error(IQARL_ERR_NULL_POINTER, "out_reward is null");
        }
        match score_reward(r_pred, r_gt, engine.cfg.coeffs.sigma) {
            Ok(v) => {
                unsafe { *out_reward = v };
                IQARL_OK
            }
            Err(e) => set_error(IQARL_ERR_VALIDATION, &e.to_string()),
        }
    })
}

/// Scores a batch of rollout records (JSONL, one record per line) and
/// evaluates the training-step objective.
///
/// On success writes the reward-annotated records as JSONL to
/// `out_annotated_jsonl` (unless null) and the step report as JSON to
/// `out_report_json` (unless null). Both are caller-owned strings.
///
/// # Safety
/// `engine` must be a live engine handle; `rollouts_jsonl` must be
/// NUL-terminated; the out pointers must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn iqarl_reward_rollouts(
    engine: *const IqarlEngine,
    rollouts_jsonl: *const c_char,
    out_annotated_jsonl: *mut *mut c_char,
    out_report_json: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        let Some(engine) = (unsafe { engine.as_ref() }) else {
            return set_error(IQARL_ERR_NULL_POINTER, "engine is null");
        };
        let text = match unsafe { read_str(rollouts_jsonl) } {
            Ok(t) => t,
            Err(code) => return code,
        };
        let mut records = match read_rollouts(text.as_bytes()) {
            Ok(r) => r,
            Err(e) => return set_error(rollout_error_code(&e), &e.to_string()),
        };
        let report = match step_report(&mut records, &engine.cfg) {
            Ok((_, report)) => report,
            Err(e) => return set_error(rollout_error_code(&e), &e.to_string()),
        };
        if !out_annotated_jsonl.is_null() {
            let mut buf = Vec::new();
            if let Err(e) = write_rollouts(&mut buf, &records) {
                return set_error(rollout_error_code(&e), &e.to_string());
            }
            let text = String::from_utf8(buf).expect("JSON is UTF-8");
            if let Err(code) = into_out_string(text, out_annotated_jsonl) {
                return code;
            }
        }
        if !out_report_json.is_null() {
            let text =
                serde_json::to_string_pretty(&report).expect("report serializes");
            if let Err(code) = into_out_string(text, out_report_json) {
                // Do not leak the annotated string written above.
                if !out_annotated_jsonl.is_null() {
                    unsafe { iqarl_string_free(*out_annotated_jsonl) };
                }
                return code;
            }
        }
        IQARL_OK
    })
}

// ---------------------------------------------------------------------------
// Curation
// ---------------------------------------------------------------------------

/// Runs the visual-reliance filter over paired-generation records (JSONL,
/// one record per line) with the engine's thresholds.
///
/// On success writes a JSON document `{"outcomes": [...], "summary": {...}}`
/// to `out_json` as a caller-owned string.
///
/// # Safety
/// `engine` must be a live engine handle; `records_jsonl` must be
/// NUL-terminated; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn iqarl_vrf_filter(
    engine: *const IqarlEngine,
    records_jsonl: *const c_char,
    out_json: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        let Some(engine) = (unsafe { engine.as_ref() }) else {
            return set_error(IQARL_ERR_NULL_POINTER, "engine is null");
        };
        let text = match unsafe { read_str(records_jsonl) } {
            Ok(t) => t,
            Err(code) => return code,
        };
        let mut outcomes: Vec<FilterOutcome> = Vec::new();
        let mut summary = CurationSummary::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: RawPairRecord = match serde_json::from_str(line) {
                Ok(r) => r,
                Err(e) => {
                    return set_error(IQARL_ERR_VALIDATION, &format!("line {}: {e}", i + 1));
                }
            };
            let outcome = iqa_rl::curation::vrf_filter_record(&record, &engine.cfg.vrf);
            summary.record(&outcome);
            outcomes.push(outcome);
        }
        let doc = serde_json::json!({ "outcomes": outcomes, "summary": summary });
        let text = serde_json::to_string_pretty(&doc).expect("document serializes");
        match into_out_string(text, out_json) {
            Ok(()) => IQARL_OK,
            Err(code) => code,
        }
    })
}

// ---------------------------------------------------------------------------
// Image descriptors
// ---------------------------------------------------------------------------

/// Computes the four image descriptors from an interleaved 8-bit RGB buffer
/// of `rgb_len` bytes (`width * height * 3`).
///
/// # Safety
/// `rgb` must point to `rgb_len` readable bytes; `out_hints` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn iqarl_compute_hints(
    rgb: *const u8,
    rgb_len: usize,
    width: usize,
    height: usize,
    out_hints: *mut IqarlHints,
) -> i32 {
    guarded(|| {
        if rgb.is_null() {
            return set_error(IQARL_ERR_NULL_POINTER, "rgb is null");
        }
        if out_hints.is_null() {
            return set_error(IQARL_ERR_NULL_POINTER, "out_hints is null");
        }
        let buf = unsafe { std::slice::from_raw_parts(rgb, rgb_len) };
        match compute_hints(buf, width, height) {
            Ok(h) => {
                unsafe {
                    *out_hints = IqarlHints {
                        brightness: h.brightness,
                        contrast: h.contrast,
                        colorfulness: h.colorfulness,
                        sharpness: h.sharpness,
                    };
                }
                IQARL_OK
            }
            Err(e) => set_error(IQARL_ERR_VALIDATION, &e.to_string()),
        }
    })
}

// ---------------------------------------------------------------------------
// Evaluation metrics
// ---------------------------------------------------------------------------

unsafe fn metric_pair(
    xs: *const f64,
    ys: *const f64,
    len: usize,
    out: *mut f64,
    f: impl Fn(&[f64], &[f64]) -> Result<f64, iqa_rl::metrics::MetricsError>,
) -> i32 {
    if xs.is_null() || ys.is_null() {
        return set_error(IQARL_ERR_NULL_POINTER, "input array is null");
    }
    if out.is_null() {
        return set_error(IQARL_ERR_NULL_POINTER, "out is null");
    }
    let xs = unsafe { std::slice::from_raw_parts(xs, len) };
    let ys = unsafe { std::slice::from_raw_parts(ys, len) };
    match f(xs, ys) {
        Ok(v) => {
            unsafe { *out = v };
            IQARL_OK
        }
        Err(e) => set_error(IQARL_ERR_VALIDATION, &e.to_string()),
    }
}

/// Pearson linear correlation of two length-`len` arrays.
///
/// # Safety
/// `xs` and `ys` must point to `len` readable doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn iqarl_plcc(
    xs: *const f64,
    ys: *const f64,
    len: usize,
    out: *mut f64,
) -> i32 {
    guarded(|| unsafe { metric_pair(xs, ys, len, out, plcc) })
}

/// Spearman rank correlation of two length-`len` arrays.
///
/// # Safety
/// `xs` and `ys` must point to `len` readable doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn iqarl_srcc(
    xs: *const f64,
    ys: *const f64,
    len: usize,
    out: *mut f64,
) -> i32 {
    guarded(|| unsafe { metric_pair(xs, ys, len, out, srcc) })
}

/// Fraction of distinct values among `len` scores after rounding to
/// `decimals` places.
///
/// # Safety
/// `scores` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn iqarl_unique_score_ratio(
    scores: *const f64,
    len: usize,
    decimals: u32,
    out: *mut f64,
) -> i32 {
    guarded(|| {
        if scores.is_null() {
            return set_error(IQARL_ERR_NULL_POINTER, "scores is null");
        }
        if out.is_null() {
            return set_error(IQARL_ERR_NULL_POINTER, "out is null");
        }
        let scores = unsafe { std::slice::from_raw_parts(scores, len) };
        match unique_score_ratio(scores, decimals) {
            Ok(v) => {
                unsafe { *out = v };
                IQARL_OK
            }
            Err(e) => set_error(IQARL_ERR_VALIDATION, &e.to_string()),
        }
    })
}

// ---------------------------------------------------------------------------
// Toy collapse experiment
// ---------------------------------------------------------------------------

/// Runs one arm of the toy score-diversity collapse experiment and writes
/// the full run report as JSON to `out_report_json` (caller-owned).
///
/// `steps` of 0 keeps the built-in default schedule.
///
/// # Safety
/// `out_report_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn iqarl_train_sim(
    klc_on: bool,
    seed: u64,
    steps: usize,
    out_report_json: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        let mut cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        if steps > 0 {
            cfg.steps = steps;
        }
        let report = match run_experiment(&cfg, klc_on) {
            Ok(r) => r,
            Err(e) => return set_error(IQARL_ERR_VALIDATION, &e.to_string()),
        };
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        match into_out_string(text, out_report_json) {
            Ok(()) => IQARL_OK,
            Err(code) => code,
        }
    })
}
