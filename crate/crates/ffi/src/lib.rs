//! C interface to the survfuse survival and modulation primitives.
//!
//! Every fallible function returns an [`SfStatus`]; on failure the message is
//! kept per thread and can be read with [`sf_last_error`]. Event indicators
//! are bytes, nonzero meaning the event was observed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use survfuse::fusion::{evaluate, FusionModel, PreparedCohort};
use survfuse::modulation::{contribution_ratio, modulation_factor, Aggregate, ModulationConfig};
use survfuse::numnet::Checkpoint;
use survfuse::survival::{concordance_index, cox_gradient, cox_loss, CoxBatch, SurvivalRecord};
use survfuse::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Undefined = 5,
    Io = 6,
    Format = 7,
    Config = 8,
    State = 9,
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> SfStatus {
    match err {
        Error::Shape { .. } => SfStatus::Shape,
        Error::Validation { .. } => SfStatus::InvalidArgument,
        Error::State(_) => SfStatus::State,
        Error::NonFinite(_) => SfStatus::NonFinite,
        Error::Undefined(_) => SfStatus::Undefined,
        Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => SfStatus::Io,
        Error::Parse { .. } | Error::Format { .. } | Error::Csv(_) | Error::Json(_) => SfStatus::Format,
        Error::Config(_) => SfStatus::Config,
        Error::Io(_) => SfStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, records any error or panic, and converts it to a status.
fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SfStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SfStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SfStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or point to `n` writable values.
unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    // SAFETY: non-null checked; the caller promises the pointer is writable
    unsafe { p.as_mut() }.ok_or(Failure::Null(what))
}

unsafe fn survival_inputs(
    theta: *const f64,
    times: *const f64,
    events: *const u8,
    n: usize,
) -> Result<(&'static [f64], &'static [f64], Vec<bool>), Failure> {
    let theta = slice(theta, n, "theta")?;
    let times = slice(times, n, "times")?;
    let events = slice(events, n, "events")?.iter().map(|&e| e != 0).collect();
    Ok((theta, times, events))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Config("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static version string, e.g. `"0.1.0"`.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Negative Cox partial log-likelihood (Breslow ties) of `theta`.
///
/// # Safety
/// `theta`, `times` and `events` must each hold `n` values; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_cox_loss(
    theta: *const f64,
    times: *const f64,
    events: *const u8,
    n: usize,
    loss: *mut f64,
) -> SfStatus {
    guarded(|| {
        let (theta, times, events) = survival_inputs(theta, times, events, n)?;
        let batch = CoxBatch::from_times(times, &events)?;
        *out(loss, "loss")? = cox_loss(theta, &batch)?;
        Ok(())
    })
}

/// Gradient of [`sf_cox_loss`] with respect to `theta`, written to `grad[0..n]`.
///
/// # Safety
/// As [`sf_cox_loss`]; `grad` must hold `n` writable values.
#[no_mangle]
pub unsafe extern "C" fn sf_cox_gradient(
    theta: *const f64,
    times: *const f64,
    events: *const u8,
    n: usize,
    grad: *mut f64,
) -> SfStatus {
    guarded(|| {
        let (theta, times, events) = survival_inputs(theta, times, events, n)?;
        let batch = CoxBatch::from_times(times, &events)?;
        let g = cox_gradient(theta, &batch)?;
        slice_mut(grad, n, "grad")?.copy_from_slice(&g);
        Ok(())
    })
}

/// Harrell's C of risk scores `theta`. `SfStatus::Undefined` when no pair is comparable.
///
/// # Safety
/// `theta`, `times` and `events` must each hold `n` values; `c_index` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_concordance_index(
    theta: *const f64,
    times: *const f64,
    events: *const u8,
    n: usize,
    c_index: *mut f64,
) -> SfStatus {
    guarded(|| {
        let (theta, times, events) = survival_inputs(theta, times, events, n)?;
        *out(c_index, "c_index")? = concordance_index(theta, times, &events)?;
        Ok(())
    })
}

/// `min(1 − tanh(rho − 1), 1)`.
#[no_mangle]
pub extern "C" fn sf_modulation_factor(rho: f64) -> f64 {
    modulation_factor(rho)
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SfModulationOptions {
    pub rho_min: f64,
    pub rho_max: f64,
    pub epsilon: f64,
    /// Nonzero: median of the per-sample ratios instead of the mean.
    pub median: u8,
    /// Nonzero: exponentiate the score in the numerator too.
    pub exp_numerator: u8,
}

#[no_mangle]
pub extern "C" fn sf_modulation_options_default() -> SfModulationOptions {
    let d = ModulationConfig::default();
    SfModulationOptions {
        rho_min: d.rho_min,
        rho_max: d.rho_max,
        epsilon: d.epsilon,
        median: u8::from(d.aggregate == Aggregate::Median),
        exp_numerator: u8::from(d.exp_numerator),
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SfContribution {
    pub rho_g_raw: f64,
    pub rho_p_raw: f64,
    pub rho_g: f64,
    pub rho_p: f64,
    pub factor_g: f64,
    pub factor_p: f64,
    /// 1 when the batch had no events (all fields neutral).
    pub degenerate: u8,
}

/// Contribution ratios and step-size factors for branch scores `s_g`, `s_p`.
/// `options` may be null for the defaults.
///
/// # Safety
/// `s_g`, `s_p`, `times` and `events` must each hold `n` values; `options`
/// must be null or valid; `result` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_contribution_ratio(
    s_g: *const f64,
    s_p: *const f64,
    times: *const f64,
    events: *const u8,
    n: usize,
    options: *const SfModulationOptions,
    result: *mut SfContribution,
) -> SfStatus {
    guarded(|| {
        let sg = slice(s_g, n, "s_g")?;
        let (sp, times, events) = survival_inputs(s_p, times, events, n)?;
        let o = options.as_ref().copied().unwrap_or_else(|| sf_modulation_options_default());
        let cfg = ModulationConfig {
            rho_min: o.rho_min,
            rho_max: o.rho_max,
            epsilon: o.epsilon,
            aggregate: if o.median != 0 { Aggregate::Median } else { Aggregate::Mean },
            exp_numerator: o.exp_numerator != 0,
            ..ModulationConfig::default()
        };
        cfg.validate()?;
        let batch = CoxBatch::from_times(times, &events)?;
        let r = contribution_ratio(sg, sp, &batch, &cfg)?;
        *out(result, "result")? = SfContribution {
            rho_g_raw: r.rho_g_raw,
            rho_p_raw: r.rho_p_raw,
            rho_g: r.rho_g,
            rho_p: r.rho_p,
            factor_g: r.factor_g,
            factor_p: r.factor_p,
            degenerate: u8::from(r.degenerate),
        };
        Ok(())
    })
}

/// A loaded cohort CSV.
pub struct SfCohort {
    records: Vec<SurvivalRecord>,
}

/// A trained fusion model loaded from a checkpoint.
pub struct SfModel {
    model: FusionModel,
}

/// # Safety
/// `path` must be a NUL-terminated string; `cohort` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_cohort_load(path: *const c_char, cohort: *mut *mut SfCohort) -> SfStatus {
    guarded(|| {
        let slot = out(cohort, "cohort")?;
        *slot = ptr::null_mut();
        let records = survfuse::cohort::load_cohort(&path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(SfCohort { records }));
        Ok(())
    })
}

/// Number of patients; 0 for a null handle.
///
/// # Safety
/// `cohort` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_cohort_len(cohort: *const SfCohort) -> usize {
    cohort.as_ref().map_or(0, |c| c.records.len())
}

/// # Safety
/// `cohort` must be null or a handle from [`sf_cohort_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_cohort_free(cohort: *mut SfCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_model_load(path: *const c_char, model: *mut *mut SfModel) -> SfStatus {
    guarded(|| {
        let slot = out(model, "model")?;
        *slot = ptr::null_mut();
        let m = FusionModel::from_checkpoint(&Checkpoint::read(&path_arg(path)?)?)?;
        *slot = Box::into_raw(Box::new(SfModel { model: m }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`sf_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_model_free(model: *mut SfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Log-hazard scores for every patient, written to `theta[0..len]`; `len`
/// must equal the cohort size.
///
/// # Safety
/// `model` and `cohort` must be live handles; `theta` must hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn sf_model_predict(
    model: *const SfModel,
    cohort: *const SfCohort,
    theta: *mut f64,
    len: usize,
) -> SfStatus {
    guarded(|| {
        let m = &model.as_ref().ok_or(Failure::Null("model"))?.model;
        let c = cohort.as_ref().ok_or(Failure::Null("cohort"))?;
        if len != c.records.len() {
            return Err(Error::Config(format!("theta holds {len} values, cohort has {}", c.records.len())).into());
        }
        let data = PreparedCohort::new(m, &c.records)?;
        let fwd = m.predict_batch(&data.inputs)?;
        slice_mut(theta, len, "theta")?.copy_from_slice(&fwd.theta);
        Ok(())
    })
}

/// C-index and per-event Cox loss of `model` on `cohort`.
///
/// # Safety
/// `model` and `cohort` must be live handles; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_model_evaluate(
    model: *const SfModel,
    cohort: *const SfCohort,
    c_index: *mut f64,
    mean_loss: *mut f64,
) -> SfStatus {
    guarded(|| {
        let m = &model.as_ref().ok_or(Failure::Null("model"))?.model;
        let c = cohort.as_ref().ok_or(Failure::Null("cohort"))?;
        let data = PreparedCohort::new(m, &c.records)?;
        let e = evaluate(m, &data)?;
        *out(c_index, "c_index")? = e.c_index;
        *out(mean_loss, "mean_loss")? = e.mean_loss;
        Ok(())
    })
}
