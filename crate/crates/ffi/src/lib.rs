//! C ABI over the dialog generator.
//!
//! Every fallible function returns a [`TodgenStatus`]. On failure a message
//! is kept per thread and can be read with [`todgen_last_error_message`].
//! Strings handed out by this library must be released with
//! [`todgen_string_free`]; handles with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use todgen::dataset::Datapoint;
use todgen::mr::{parse_action_list, print_action_list};
use todgen::pipeline::{Pipeline, PipelineConfig, PipelineError, StageSummary};
use todgen::schema::SchemaSet;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TodgenStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Config = 4,
    Io = 5,
    Pipeline = 6,
    Panic = 7,
}

/// Opaque loaded schema set.
pub struct TodgenSchemaSet(SchemaSet);

/// Opaque configured pipeline.
pub struct TodgenPipeline(Pipeline);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    let c = CString::new(text).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(TodgenStatus, String);

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::Config(_) => TodgenStatus::Config,
            PipelineError::MissingInput { .. } | PipelineError::Io { .. } => TodgenStatus::Io,
            PipelineError::Data { .. } | PipelineError::Backend(_) => TodgenStatus::Pipeline,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TodgenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TodgenStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TodgenStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(TodgenStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TodgenStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

fn out_ptr<T>(out: *mut T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        Err(Failure(TodgenStatus::NullArgument, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

fn to_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("interior nuls removed").into_raw()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn todgen_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or was returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn todgen_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse one action or a bracketed action list and print it canonically.
///
/// # Safety
/// `input` is a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn todgen_mr_canonicalize(input: *const c_char, out: *mut *mut c_char) -> TodgenStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let text = arg(input, "input")?;
        let actions = parse_action_list(text).map_err(|e| Failure(TodgenStatus::Parse, e.to_string()))?;
        *out = to_c(print_action_list(&actions));
        Ok(())
    })
}

/// Load schemas from a manifest, or the bundled set when `manifest_path`
/// is null.
///
/// # Safety
/// `manifest_path` is null or a NUL-terminated string; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn todgen_schema_load(
    manifest_path: *const c_char,
    out: *mut *mut TodgenSchemaSet,
) -> TodgenStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let set = if manifest_path.is_null() {
            SchemaSet::bundled()
        } else {
            let p = arg(manifest_path, "manifest_path")?;
            SchemaSet::load_manifest(Path::new(p)).map_err(|e| Failure(TodgenStatus::Config, e.to_string()))?
        };
        *out = Box::into_raw(Box::new(TodgenSchemaSet(set)));
        Ok(())
    })
}

/// Total number of intents over all services; 0 for a null handle.
///
/// # Safety
/// `set` is null or a live handle from [`todgen_schema_load`].
#[no_mangle]
pub unsafe extern "C" fn todgen_schema_intent_count(set: *const TodgenSchemaSet) -> usize {
    match set.as_ref() {
        Some(s) => s.0.services.iter().map(|s| s.intent_operations.len()).sum(),
        None => 0,
    }
}

/// # Safety
/// `set` is null or a live handle from [`todgen_schema_load`].
#[no_mangle]
pub unsafe extern "C" fn todgen_schema_free(set: *mut TodgenSchemaSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Configure a pipeline from TOML text. A non-null `out_dir` overrides the
/// configured output directory.
///
/// # Safety
/// `config_toml` is a NUL-terminated string, `out_dir` null or one; `out`
/// is valid.
#[no_mangle]
pub unsafe extern "C" fn todgen_pipeline_new(
    config_toml: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut TodgenPipeline,
) -> TodgenStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let mut cfg = PipelineConfig::parse(arg(config_toml, "config_toml")?)?;
        if !out_dir.is_null() {
            cfg.out_dir = arg(out_dir, "out_dir")?.into();
        }
        *out = Box::into_raw(Box::new(TodgenPipeline(Pipeline::new(cfg)?)));
        Ok(())
    })
}

/// Run one stage (`personas`, `contexts`, `plots`, `realize`, `qc`,
/// `stats`, `split`) or `run-all`. A JSON array of stage summaries is
/// written to `summary_out`. Item-level failures are reported in the
/// summaries and yield [`TodgenStatus::Pipeline`].
///
/// # Safety
/// `pipeline` is a live handle, `stage` a NUL-terminated string and
/// `summary_out` null or valid.
#[no_mangle]
pub unsafe extern "C" fn todgen_pipeline_run(
    pipeline: *mut TodgenPipeline,
    stage: *const c_char,
    summary_out: *mut *mut c_char,
) -> TodgenStatus {
    guard(|| {
        let p = match pipeline.as_ref() {
            Some(p) => &p.0,
            None => return Err(Failure(TodgenStatus::NullArgument, "`pipeline` is null".into())),
        };
        let one = |r: Result<StageSummary, PipelineError>| r.map(|s| vec![s]);
        let stages = match arg(stage, "stage")? {
            "personas" => one(p.run_personas()),
            "contexts" => one(p.run_contexts()),
            "plots" => one(p.run_plots()),
            "realize" => one(p.run_realize()),
            "qc" => one(p.run_qc()),
            "stats" => one(p.run_stats()),
            "split" => one(p.run_split()),
            "run-all" => p.run_all(),
            other => return Err(Failure(TodgenStatus::Config, format!("unknown stage `{other}`"))),
        }?;
        if !summary_out.is_null() {
            *summary_out = to_c(serde_json::to_string(&stages).expect("summaries serialize"));
        }
        let failed = stages.iter().map(|s| s.errors.len()).sum::<usize>();
        if failed > 0 {
            return Err(Failure(TodgenStatus::Pipeline, format!("{failed} item(s) failed")));
        }
        Ok(())
    })
}

/// # Safety
/// `pipeline` is null or a live handle from [`todgen_pipeline_new`].
#[no_mangle]
pub unsafe extern "C" fn todgen_pipeline_free(pipeline: *mut TodgenPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Run the deterministic quality checks on one datapoint given as JSON and
/// write the report as JSON.
///
/// # Safety
/// `datapoint_json` is a NUL-terminated string; `report_out` is valid.
#[no_mangle]
pub unsafe extern "C" fn todgen_qc_check_json(
    datapoint_json: *const c_char,
    report_out: *mut *mut c_char,
) -> TodgenStatus {
    guard(|| {
        out_ptr(report_out, "report_out")?;
        let dp: Datapoint = serde_json::from_str(arg(datapoint_json, "datapoint_json")?)
            .map_err(|e| Failure(TodgenStatus::Parse, e.to_string()))?;
        let report = todgen::qc::run_qc(&dp, None).map_err(|e| Failure(TodgenStatus::Pipeline, e.to_string()))?;
        *report_out = to_c(serde_json::to_string(&report).expect("reports serialize"));
        Ok(())
    })
}
