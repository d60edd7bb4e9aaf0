//! C ABI over the signpipe engine.
//!
//! Handles are opaque and owned by the caller once returned; free them with
//! the matching `*_free`. Strings returned as `char *` must be released with
//! [`sp_string_free`]. On failure a function returns a non-zero [`SpStatus`]
//! and [`sp_last_error`] describes it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use signpipe::config::{self, ConfigTree, JobConfig, Overrides};
use signpipe::export;
use signpipe::pipeline::{self, ExecuteOptions, RunReport};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Config parse or validation failure; nothing was written.
    Validation = 3,
    /// A stage failed; a report may still exist on disk.
    Stage = 4,
    /// Shard verification found problems.
    Verify = 5,
    Panic = 6,
}

/// A parsed, validated job.
pub struct SpJob {
    tree: ConfigTree,
    config: JobConfig,
}

/// Outcome of a run.
pub struct SpReport {
    report: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: SpStatus, msg: impl Into<String>) -> SpStatus {
    set_error(msg);
    status
}

/// Run `f`, turning panics into [`SpStatus::Panic`].
fn guard(f: impl FnOnce() -> SpStatus) -> SpStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SpStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, SpStatus> {
    if p.is_null() {
        return Err(fail(SpStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SpStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn to_c(s: impl Into<Vec<u8>>) -> *mut c_char {
    let mut bytes = s.into();
    bytes.retain(|b| *b != 0);
    CString::new(bytes).expect("no interior nul").into_raw()
}

fn job_from_tree(tree: ConfigTree, out: *mut *mut SpJob) -> SpStatus {
    match config::from_tree(tree.clone()) {
        Ok(config) => {
            unsafe { *out = Box::into_raw(Box::new(SpJob { tree, config })) };
            SpStatus::Ok
        }
        Err(e) => fail(SpStatus::Validation, e.to_string()),
    }
}

/// Message for the last failure on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn sp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn sp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn sp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load and validate a YAML job file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_job_load(path: *const c_char, out: *mut *mut SpJob) -> SpStatus {
    guard(|| {
        if out.is_null() {
            return fail(SpStatus::NullArgument, "out is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match config::read_tree(Path::new(path)) {
            Ok(tree) => job_from_tree(tree, out),
            Err(e) => fail(SpStatus::Validation, e.to_string()),
        }
    })
}

/// Parse and validate a job from YAML text.
///
/// # Safety
/// `yaml` must be a nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_job_parse(yaml: *const c_char, out: *mut *mut SpJob) -> SpStatus {
    guard(|| {
        if out.is_null() {
            return fail(SpStatus::NullArgument, "out is null");
        }
        let text = match str_arg(yaml, "yaml") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match config::parse_tree(text, "<ffi>") {
            Ok(tree) => job_from_tree(tree, out),
            Err(e) => fail(SpStatus::Validation, e.to_string()),
        }
    })
}

/// Apply one `dotted.path=value` override. The job is left untouched when the
/// result does not validate.
///
/// # Safety
/// `job` must come from [`sp_job_load`] or [`sp_job_parse`].
#[no_mangle]
pub unsafe extern "C" fn sp_job_set(job: *mut SpJob, assignment: *const c_char) -> SpStatus {
    guard(|| {
        let Some(job) = job.as_mut() else {
            return fail(SpStatus::NullArgument, "job is null");
        };
        let assignment = match str_arg(assignment, "assignment") {
            Ok(a) => a,
            Err(s) => return s,
        };
        let merged = config::parse_override(assignment)
            .and_then(|(k, v)| config::merge_overrides(job.tree.clone(), &Overrides::from([(k, v)])))
            .and_then(|tree| config::from_tree(tree.clone()).map(|c| (tree, c)));
        match merged {
            Ok((tree, config)) => {
                job.tree = tree;
                job.config = config;
                SpStatus::Ok
            }
            Err(e) => fail(SpStatus::Validation, e.to_string()),
        }
    })
}

/// Deterministic run id of the job. Free with [`sp_string_free`].
///
/// # Safety
/// `job` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sp_job_run_id(job: *const SpJob) -> *mut c_char {
    match job.as_ref() {
        Some(j) => to_c(pipeline::run_id(&j.config)),
        None => ptr::null_mut(),
    }
}

/// Canonical JSON of the validated config. Free with [`sp_string_free`].
///
/// # Safety
/// `job` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sp_job_canonical_json(job: *const SpJob) -> *mut c_char {
    match job.as_ref() {
        Some(j) => to_c(config::canonical_serialize(&j.config)),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `job` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn sp_job_free(job: *mut SpJob) {
    if !job.is_null() {
        drop(Box::from_raw(job));
    }
}

/// Execute the job. On [`SpStatus::Stage`] `*out` is still set when a report
/// could be built, and must be freed.
///
/// # Safety
/// `job` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_job_run(job: *const SpJob, out: *mut *mut SpReport) -> SpStatus {
    guard(|| {
        let Some(job) = job.as_ref() else {
            return fail(SpStatus::NullArgument, "job is null");
        };
        if out.is_null() {
            return fail(SpStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        match pipeline::execute_job(&job.config, &ExecuteOptions::default()) {
            Ok(report) => {
                *out = Box::into_raw(Box::new(SpReport { report }));
                SpStatus::Ok
            }
            Err(e) => {
                let dir = pipeline::run_dir(&job.config);
                if let Ok(bytes) = std::fs::read(dir.join(RunReport::FILE_NAME)) {
                    if let Ok(report) = serde_json::from_slice(&bytes) {
                        *out = Box::into_raw(Box::new(SpReport { report }));
                    }
                }
                let status = if e.is_validation() {
                    SpStatus::Validation
                } else {
                    SpStatus::Stage
                };
                fail(status, e.to_string())
            }
        }
    })
}

/// The report as written to `report.json`. Free with [`sp_string_free`].
///
/// # Safety
/// `report` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sp_report_json(report: *const SpReport) -> *mut c_char {
    match report.as_ref() {
        Some(r) => to_c(r.report.to_bytes()),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `report` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sp_report_samples_exported(report: *const SpReport) -> u64 {
    report.as_ref().map_or(0, |r| r.report.samples_exported)
}

/// # Safety
/// `report` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn sp_report_free(report: *mut SpReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Check a shard directory (or a run directory holding `shards/`).
/// `samples` may be null.
///
/// # Safety
/// `dir` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sp_shards_verify(dir: *const c_char, samples: *mut u64) -> SpStatus {
    guard(|| {
        let dir = match str_arg(dir, "dir") {
            Ok(d) => Path::new(d),
            Err(s) => return s,
        };
        let dir = if dir.join(export::ShardIndex::FILE_NAME).exists() {
            dir.to_path_buf()
        } else {
            dir.join(pipeline::Stage::Export.dir_name())
        };
        let report = export::verify_shards(&dir);
        if let Some(n) = samples.as_mut() {
            *n = report.samples;
        }
        if report.ok() {
            SpStatus::Ok
        } else {
            fail(SpStatus::Verify, report.problems.join("; "))
        }
    })
}
