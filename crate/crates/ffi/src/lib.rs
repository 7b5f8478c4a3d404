//! C ABI over `fairmc`.
//!
//! Every entry point returns a [`FairmcStatus`]; on failure the message is
//! available from [`fairmc_last_error`] on the same thread. Handles are
//! opaque and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fairmc::dataio;
use fairmc::fairmetrics::{self, EvalOptions, FairnessDomain};
use fairmc::kdereg::{PenaltyConfig, PenaltyKind};
use fairmc::mftrain::{self, FactorModel, TrainConfig};
use fairmc::synthgen::{self, SyntheticConfig};
use fairmc::types::{split_observations, GroupAssignment, RatingDataset, SplitSpec};
use fairmc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairmcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Unsupported = 3,
    Parse = 4,
    Io = 5,
    Divergence = 6,
    Panic = 7,
}

pub const FAIRMC_PENALTY_NONE: u32 = 0;
pub const FAIRMC_PENALTY_DEE: u32 = 1;
pub const FAIRMC_PENALTY_DER: u32 = 2;
pub const FAIRMC_PENALTY_UGF: u32 = 3;
pub const FAIRMC_PENALTY_CVS: u32 = 4;
pub const FAIRMC_PENALTY_VAL: u32 = 5;
pub const FAIRMC_PENALTY_DEE_COND_Y: u32 = 6;
pub const FAIRMC_PENALTY_COV: u32 = 7;

/// A rating dataset with its group labels.
pub struct FairmcDataset {
    dataset: RatingDataset,
    groups: GroupAssignment,
}

/// A trained factor model and the split it was trained on.
pub struct FairmcModel {
    model: FactorModel,
    options: FairmcTrainOptions,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FairmcSyntheticConfig {
    pub n: u64,
    pub m: u64,
    pub rank: u64,
    /// Preference probability by (user group, item group).
    pub p: [[f64; 2]; 2],
    /// Observation probability by (user group, item group).
    pub q: [[f64; 2]; 2],
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FairmcTrainOptions {
    /// One of the `FAIRMC_PENALTY_*` constants.
    pub penalty: u32,
    pub lambda: f64,
    /// Preference threshold; NaN selects the dataset default.
    pub tau: f64,
    pub bandwidth: f64,
    pub huber_delta: f64,
    pub rank: u64,
    pub iterations: u64,
    pub learning_rate: f64,
    pub init_scale: f64,
    /// Seeds both the train/test split and the initialization.
    pub seed: u64,
    pub train_fraction: f64,
}

/// Metrics of a model; NaN marks a measure that is undefined for the groups.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FairmcMetrics {
    pub rmse: f64,
    pub dee: f64,
    pub der: f64,
    pub ugf: f64,
    pub cvs: f64,
    pub val: f64,
    pub dee_cond_y: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FairmcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::InvalidInput(_) | Error::Consistency(_) => FairmcStatus::InvalidArgument,
            Error::Unsupported(_) => FairmcStatus::Unsupported,
            Error::Parse { .. } | Error::Format(_) | Error::Json(_) => FairmcStatus::Parse,
            Error::Io(_) => FairmcStatus::Io,
            Error::Divergence { .. } => FairmcStatus::Divergence,
            Error::Run { .. } => FairmcStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FairmcStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FairmcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FairmcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FairmcStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(FairmcStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn usize_arg(v: u64, what: &str) -> Result<usize, Failure> {
    usize::try_from(v).map_err(|_| Failure(FairmcStatus::InvalidArgument, format!("{what} {v} is too large")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fairmc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fairmc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn fairmc_synthetic_config_default() -> FairmcSyntheticConfig {
    let d = SyntheticConfig::default();
    FairmcSyntheticConfig { n: d.n as u64, m: d.m as u64, rank: d.r as u64, p: d.p, q: d.q, seed: d.seed }
}

/// # Safety
/// `config` must be valid for reads and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fairmc_dataset_synthetic(config: *const FairmcSyntheticConfig, out: *mut *mut FairmcDataset) -> FairmcStatus {
    guard(|| {
        let c = unsafe { deref(config, "config") }?;
        let cfg = SyntheticConfig {
            n: usize_arg(c.n, "n")?,
            m: usize_arg(c.m, "m")?,
            r: usize_arg(c.rank, "rank")?,
            p: c.p,
            q: c.q,
            seed: c.seed,
        };
        let (dataset, groups) = synthgen::generate(&cfg)?;
        unsafe { put(out, FairmcDataset { dataset, groups }) }
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fairmc_dataset_load(path: *const c_char, out: *mut *mut FairmcDataset) -> FairmcStatus {
    guard(|| {
        let path = unsafe { path_arg(path) }?;
        let (dataset, groups) = dataio::load_dataset(&path)?;
        unsafe { put(out, FairmcDataset { dataset, groups }) }
    })
}

/// # Safety
/// `dataset` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fairmc_dataset_save(dataset: *const FairmcDataset, path: *const c_char) -> FairmcStatus {
    guard(|| {
        let d = unsafe { deref(dataset, "dataset") }?;
        let path = unsafe { path_arg(path) }?;
        dataio::save_dataset(&path, &d.dataset, &d.groups)?;
        Ok(())
    })
}

/// # Safety
/// `dataset` must be valid; `n_users`, `n_items` and `n_observed` may each be null.
#[no_mangle]
pub unsafe extern "C" fn fairmc_dataset_dims(
    dataset: *const FairmcDataset,
    n_users: *mut u64,
    n_items: *mut u64,
    n_observed: *mut u64,
) -> FairmcStatus {
    guard(|| {
        let d = unsafe { deref(dataset, "dataset") }?;
        let (n, m) = d.dataset.dim();
        for (p, v) in [(n_users, n), (n_items, m), (n_observed, d.dataset.observed().len())] {
            if let Some(p) = unsafe { p.as_mut() } {
                *p = v as u64;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fairmc_dataset_free(dataset: *mut FairmcDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Defaults: unfair model, rank 20, 1000 Adam steps, 90/10 split.
#[no_mangle]
pub extern "C" fn fairmc_train_options_default() -> FairmcTrainOptions {
    let t = TrainConfig::default();
    FairmcTrainOptions {
        penalty: FAIRMC_PENALTY_NONE,
        lambda: 0.0,
        tau: f64::NAN,
        bandwidth: 0.01,
        huber_delta: 0.01,
        rank: t.rank as u64,
        iterations: t.iterations as u64,
        learning_rate: t.learning_rate,
        init_scale: t.init_scale,
        seed: t.seed,
        train_fraction: 0.9,
    }
}

fn penalty_kind(code: u32) -> Result<PenaltyKind, Failure> {
    Ok(match code {
        FAIRMC_PENALTY_NONE => PenaltyKind::None,
        FAIRMC_PENALTY_DEE => PenaltyKind::Dee,
        FAIRMC_PENALTY_DER => PenaltyKind::Der,
        FAIRMC_PENALTY_UGF => PenaltyKind::Ugf,
        FAIRMC_PENALTY_CVS => PenaltyKind::Cvs,
        FAIRMC_PENALTY_VAL => PenaltyKind::Val,
        FAIRMC_PENALTY_DEE_COND_Y => PenaltyKind::DeeCondY,
        FAIRMC_PENALTY_COV => PenaltyKind::Cov,
        other => return Err(Failure(FairmcStatus::InvalidArgument, format!("unknown penalty code {other}"))),
    })
}

fn resolve_tau(o: &FairmcTrainOptions, d: &RatingDataset) -> f64 {
    if o.tau.is_nan() { d.domain().default_threshold() } else { o.tau }
}

/// Train a factor model on the training part of `dataset`.
///
/// # Safety
/// `dataset` and `options` must be valid; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fairmc_train_mf(
    dataset: *const FairmcDataset,
    options: *const FairmcTrainOptions,
    out: *mut *mut FairmcModel,
) -> FairmcStatus {
    guard(|| {
        let d = unsafe { deref(dataset, "dataset") }?;
        let o = *unsafe { deref(options, "options") }?;
        let penalty = PenaltyConfig {
            kind: penalty_kind(o.penalty)?,
            tau: resolve_tau(&o, &d.dataset),
            bandwidth: o.bandwidth,
            huber_delta: o.huber_delta,
            lambda: o.lambda,
        };
        let cfg = TrainConfig {
            rank: usize_arg(o.rank, "rank")?,
            iterations: usize_arg(o.iterations, "iterations")?,
            learning_rate: o.learning_rate,
            init_scale: o.init_scale,
            seed: o.seed,
            ..TrainConfig::default()
        };
        let (train, _) = split_observations(d.dataset.observed(), SplitSpec::new(o.train_fraction, o.seed)?)?;
        let (model, _) = mftrain::train(&d.dataset, &train, &d.groups, &penalty, &cfg)?;
        unsafe { put(out, FairmcModel { model, options: o }) }
    })
}

/// # Safety
/// `model` must be valid; `n_users` and `n_items` may each be null.
#[no_mangle]
pub unsafe extern "C" fn fairmc_model_dims(model: *const FairmcModel, n_users: *mut u64, n_items: *mut u64) -> FairmcStatus {
    guard(|| {
        let m = unsafe { deref(model, "model") }?;
        let (n, k) = m.model.dim();
        for (p, v) in [(n_users, n), (n_items, k)] {
            if let Some(p) = unsafe { p.as_mut() } {
                *p = v as u64;
            }
        }
        Ok(())
    })
}

/// Write the full predicted matrix, row-major, into `out[0..len]`;
/// `len` must equal users times items.
///
/// # Safety
/// `model` must be valid and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn fairmc_model_predict(model: *const FairmcModel, out: *mut f64, len: usize) -> FairmcStatus {
    guard(|| {
        let m = unsafe { deref(model, "model") }?;
        if out.is_null() {
            return Err(null("output buffer"));
        }
        let (n, k) = m.model.dim();
        if len != n * k {
            return Err(Failure(FairmcStatus::InvalidArgument, format!("buffer holds {len} values, prediction has {}", n * k)));
        }
        let pred = m.model.predict();
        let dst = unsafe { std::slice::from_raw_parts_mut(out, len) };
        for (d, s) in dst.iter_mut().zip(pred.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Evaluate `model` on `dataset` with the split and threshold it was trained with.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fairmc_evaluate(
    dataset: *const FairmcDataset,
    model: *const FairmcModel,
    out: *mut FairmcMetrics,
) -> FairmcStatus {
    guard(|| {
        let d = unsafe { deref(dataset, "dataset") }?;
        let m = unsafe { deref(model, "model") }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("metrics"))?;
        if m.model.dim() != d.dataset.dim() {
            return Err(Failure(
                FairmcStatus::InvalidArgument,
                format!("model is {:?}, dataset is {:?}", m.model.dim(), d.dataset.dim()),
            ));
        }
        let o = &m.options;
        let (_, test) = split_observations(d.dataset.observed(), SplitSpec::new(o.train_fraction, o.seed)?)?;
        let opts = EvalOptions { tau: resolve_tau(o, &d.dataset), topk: Vec::new(), domain: FairnessDomain::All };
        let r = fairmetrics::evaluate(&m.model.predict(), &d.dataset, &d.groups, &test, &opts)?;
        let nan = |v: Option<f64>| v.unwrap_or(f64::NAN);
        *out = FairmcMetrics {
            rmse: r.rmse,
            dee: r.dee,
            der: r.der,
            ugf: nan(r.ugf),
            cvs: nan(r.cvs),
            val: nan(r.val),
            dee_cond_y: nan(r.dee_cond_y),
        };
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fairmc_model_free(model: *mut FairmcModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}
