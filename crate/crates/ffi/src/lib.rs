//! C ABI for the planner.
//!
//! Every function returns an [`MkpStatus`]. Objects cross the boundary as
//! opaque pointers owned by the caller and released with the matching
//! `*_free`. On failure, [`mkp_last_error`] describes what went wrong on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mk_planner::hw::{compute_page_budget, compute_stage_count, HardwareSpec, PageBudget};
use mk_planner::ir::{load_graph, OperatorGraph};
use mk_planner::search::{search, SearchOptions, SearchSpace};
use mk_planner::trace::SolidifiedTrace;
use mk_planner::{Error, ErrorClass};

/// Result codes. Non-zero values match the command-line exit codes where
/// one exists.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MkpStatus {
    Ok = 0,
    Io = 1,
    MissingInput = 2,
    Parse = 3,
    Validation = 4,
    NoFeasibleCandidate = 5,
    Deadlock = 6,
    /// Null pointer or non-UTF-8 string argument.
    InvalidArgument = 7,
    Panic = 8,
}

/// Operator graph handle.
pub struct MkpGraph {
    inner: OperatorGraph,
}

/// Hardware description handle.
pub struct MkpHardware {
    inner: HardwareSpec,
}

/// Solidified schedule handle.
pub struct MkpTrace {
    inner: SolidifiedTrace,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MkpStatus {
    match e.class() {
        ErrorClass::Io => MkpStatus::Io,
        ErrorClass::MissingInput => MkpStatus::MissingInput,
        ErrorClass::Parse => MkpStatus::Parse,
        ErrorClass::Validation => MkpStatus::Validation,
        ErrorClass::NoFeasibleCandidate => MkpStatus::NoFeasibleCandidate,
        ErrorClass::InternalDeadlock => MkpStatus::Deadlock,
    }
}

enum Fail {
    Arg(&'static str),
    Planner(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Planner(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MkpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MkpStatus::Ok,
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg.to_string());
            MkpStatus::InvalidArgument
        }
        Ok(Err(Fail::Planner(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".to_string());
            MkpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Arg(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Arg(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Arg(what))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mkp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mkp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mkp_graph_load(path: *const c_char, out: *mut *mut MkpGraph) -> MkpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let inner = load_graph(Path::new(path))?;
        *out = Box::into_raw(Box::new(MkpGraph { inner }));
        Ok(())
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mkp_graph_from_json(
    json: *const c_char,
    out: *mut *mut MkpGraph,
) -> MkpStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let inner = OperatorGraph::from_json(json)?;
        *out = Box::into_raw(Box::new(MkpGraph { inner }));
        Ok(())
    })
}

/// # Safety
/// `graph` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn mkp_graph_free(graph: *mut MkpGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mkp_hw_load(path: *const c_char, out: *mut *mut MkpHardware) -> MkpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let inner = HardwareSpec::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(MkpHardware { inner }));
        Ok(())
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mkp_hw_from_json(
    json: *const c_char,
    out: *mut *mut MkpHardware,
) -> MkpStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let inner = HardwareSpec::from_json(json)?;
        *out = Box::into_raw(Box::new(MkpHardware { inner }));
        Ok(())
    })
}

/// # Safety
/// `hw` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn mkp_hw_free(hw: *mut MkpHardware) {
    if !hw.is_null() {
        drop(Box::from_raw(hw));
    }
}

/// Pages left after `n_stage` per-stage overheads.
///
/// # Safety
/// `hw` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mkp_page_budget(
    hw: *const MkpHardware,
    n_stage: u64,
    out: *mut u64,
) -> MkpStatus {
    guard(|| {
        let hw = ref_arg(hw, "hw")?;
        *out_arg(out, "out")? = compute_page_budget(&hw.inner, n_stage);
        Ok(())
    })
}

/// Deepest pipeline that fits `total` pages after `reserved` fixed pages.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mkp_stage_count(
    total: u64,
    reserved: u64,
    per_stage: u64,
    out: *mut u64,
) -> MkpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = compute_stage_count(&PageBudget {
            n_page_total: total,
            n_page_act: reserved,
            n_page_per_stage: per_stage,
            ..PageBudget::default()
        })?;
        Ok(())
    })
}

/// Searches `space_json` and returns the winning schedule.
///
/// # Safety
/// Handles must be live, `space_json` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mkp_search(
    graph: *const MkpGraph,
    hw: *const MkpHardware,
    space_json: *const c_char,
    budget: u64,
    out: *mut *mut MkpTrace,
) -> MkpStatus {
    guard(|| {
        let graph = &ref_arg(graph, "graph")?.inner;
        let hw = &ref_arg(hw, "hw")?.inner;
        let space = SearchSpace::from_json(str_arg(space_json, "space_json")?)?;
        let out = out_arg(out, "out")?;
        let outcome = search(graph, hw, &space, &SearchOptions::with_budget(budget))?;
        let inner = SolidifiedTrace::from_outcome(&outcome, graph, hw, &space)?;
        *out = Box::into_raw(Box::new(MkpTrace { inner }));
        Ok(())
    })
}

/// Parses a serialized trace and checks its version and hash.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mkp_trace_parse(
    bytes: *const u8,
    len: usize,
    out: *mut *mut MkpTrace,
) -> MkpStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(Fail::Arg("bytes"));
        }
        let out = out_arg(out, "out")?;
        let inner = SolidifiedTrace::parse(std::slice::from_raw_parts(bytes, len))?;
        *out = Box::into_raw(Box::new(MkpTrace { inner }));
        Ok(())
    })
}

/// Canonical serialized form; free with [`mkp_string_free`].
///
/// # Safety
/// `trace` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mkp_trace_serialize(
    trace: *const MkpTrace,
    out: *mut *mut c_char,
) -> MkpStatus {
    guard(|| {
        let trace = ref_arg(trace, "trace")?;
        let out = out_arg(out, "out")?;
        let bytes = trace.inner.serialize()?;
        *out = CString::new(bytes)
            .map_err(|_| Fail::Arg("trace"))?
            .into_raw();
        Ok(())
    })
}

/// Checks the trace against its inputs and re-simulates it.
///
/// # Safety
/// Handles must be live.
#[no_mangle]
pub unsafe extern "C" fn mkp_trace_verify(
    trace: *const MkpTrace,
    graph: *const MkpGraph,
    hw: *const MkpHardware,
) -> MkpStatus {
    guard(|| {
        let trace = &ref_arg(trace, "trace")?.inner;
        let graph = &ref_arg(graph, "graph")?.inner;
        let hw = &ref_arg(hw, "hw")?.inner;
        trace.verify_inputs(graph, hw)?;
        trace.resimulate(graph, hw)?;
        Ok(())
    })
}

/// # Safety
/// `trace` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mkp_trace_score(
    trace: *const MkpTrace,
    duty_cycle: *mut f64,
    makespan: *mut u64,
) -> MkpStatus {
    guard(|| {
        let score = ref_arg(trace, "trace")?.inner.score;
        *out_arg(duty_cycle, "duty_cycle")? = score.duty_cycle;
        *out_arg(makespan, "makespan")? = score.makespan;
        Ok(())
    })
}

/// Configuration encoding of the winning plan; free with [`mkp_string_free`].
///
/// # Safety
/// `trace` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mkp_trace_config(
    trace: *const MkpTrace,
    out: *mut *mut c_char,
) -> MkpStatus {
    guard(|| {
        let trace = ref_arg(trace, "trace")?;
        let out = out_arg(out, "out")?;
        *out = CString::new(trace.inner.plan.config.encoding())
            .map_err(|_| Fail::Arg("trace"))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `trace` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn mkp_trace_free(trace: *mut MkpTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}
