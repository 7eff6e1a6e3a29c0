//! C ABI over the `duadeep` core.
//!
//! Every fallible call returns a [`DdStatus`]; its numeric value matches the
//! command-line exit code for the same error class. After a failure,
//! [`dd_last_error`] returns a message for the calling thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use duadeep::dataio::{encode_pair, kd_to_pkd, pkd_to_kd, Scaler};
use duadeep::embedding::{EmbeddingMatrix, EmbeddingStore};
use duadeep::metrics;
use duadeep::model::{checkpoint_precision, load_checkpoint, Model, StreamInput};
use duadeep::tensor::{Precision, Scalar, Tensor};
use duadeep::{Error, Result};

/// Result of a call. Values equal the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not UTF-8.
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    NoRecordsRetained = 5,
    SplitInfeasible = 6,
    Config = 7,
    MissingEmbedding = 8,
    NonFinite = 9,
    GradCheckFailed = 10,
    /// A value or record outside the accepted domain.
    Domain = 11,
    UndefinedMetric = 12,
    Contract = 70,
    /// A Rust panic was caught at the boundary.
    Internal = 99,
}

fn status_of(e: &Error) -> DdStatus {
    match e.exit_code() {
        3 => DdStatus::Io,
        4 => DdStatus::Format,
        5 => DdStatus::NoRecordsRetained,
        6 => DdStatus::SplitInfeasible,
        7 => DdStatus::Config,
        8 => DdStatus::MissingEmbedding,
        9 => DdStatus::NonFinite,
        10 => DdStatus::GradCheckFailed,
        11 => DdStatus::Domain,
        12 => DdStatus::UndefinedMetric,
        _ => DdStatus::Contract,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, records any failure, and converts it into a status.
fn guard(f: impl FnOnce() -> std::result::Result<(), Failure>) -> DdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DdStatus::Ok,
        Ok(Err(Failure::Null(arg))) => {
            set_error(format!("argument `{arg}` is null"));
            DdStatus::NullArgument
        }
        Ok(Err(Failure::Utf8(arg))) => {
            set_error(format!("argument `{arg}` is not valid UTF-8"));
            DdStatus::InvalidUtf8
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            DdStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> std::result::Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(name))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, name: &'static str) -> std::result::Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &'static str) -> std::result::Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// A loaded checkpoint.
pub struct DdModel {
    model: AnyModel,
    scaler: Option<Scaler>,
}

impl DdModel {
    fn d_e(&self) -> usize {
        match &self.model {
            AnyModel::F32(m) => m.config().d_e,
            AnyModel::F64(m) => m.config().d_e,
        }
    }

    fn param_count(&self) -> usize {
        match &self.model {
            AnyModel::F32(m) => m.param_count(),
            AnyModel::F64(m) => m.param_count(),
        }
    }

    fn predict(&self, ag: &EmbeddingMatrix, ab: &EmbeddingMatrix) -> Result<f64> {
        fn go<T: Scalar>(m: &Model<T>, ag: &EmbeddingMatrix, ab: &EmbeddingMatrix) -> Result<f64> {
            Ok(m.predict(&StreamInput::from_matrix(ag), &StreamInput::from_matrix(ab))?
                .as_f64())
        }
        match &self.model {
            AnyModel::F32(m) => go(m, ag, ab),
            AnyModel::F64(m) => go(m, ag, ab),
        }
    }

    fn unstandardize(&self, z: f64) -> Result<f64> {
        self.scaler
            .map(|s| s.invert(z))
            .ok_or_else(|| Error::ConfigMismatch("checkpoint carries no target scaler".into()))
    }
}

/// Loads a checkpoint of either precision. On success `*out` owns a handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dd_model_load(path: *const c_char, out: *mut *mut DdModel) -> DdStatus {
    guard(|| {
        let path = Path::new(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let handle = match checkpoint_precision(path)? {
            Precision::F32 => {
                let c = load_checkpoint::<f32>(path)?;
                DdModel {
                    model: AnyModel::F32(c.model),
                    scaler: c.scaler,
                }
            }
            Precision::F64 => {
                let c = load_checkpoint::<f64>(path)?;
                DdModel {
                    model: AnyModel::F64(c.model),
                    scaler: c.scaler,
                }
            }
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dd_model_load`] and not be freed twice. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn dd_model_free(model: *mut DdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width the model expects; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_model_d_e(model: *const DdModel) -> usize {
    model.as_ref().map_or(0, DdModel::d_e)
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_model_param_count(model: *const DdModel) -> usize {
    model.as_ref().map_or(0, DdModel::param_count)
}

unsafe fn matrix_arg(p: *const f32, rows: usize, d_e: usize, name: &'static str) -> std::result::Result<EmbeddingMatrix, Failure> {
    if rows == 0 {
        return Err(Error::EmptySequence.into());
    }
    let data = slice_arg(p, rows * d_e, name)?;
    Ok(EmbeddingMatrix::new(name, Tensor::new(vec![rows, d_e], data.to_vec())?)?)
}

/// Standardized score for one pair of row-major `rows x d_e` embedding
/// matrices, `d_e` being [`dd_model_d_e`].
///
/// # Safety
/// `antigen` must point to `antigen_rows * d_e` floats, likewise `antibody`;
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dd_model_predict(
    model: *const DdModel,
    antigen: *const f32,
    antigen_rows: usize,
    antibody: *const f32,
    antibody_rows: usize,
    out: *mut f64,
) -> DdStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let out = out_arg(out, "out")?;
        let ag = matrix_arg(antigen, antigen_rows, m.d_e(), "antigen")?;
        let ab = matrix_arg(antibody, antibody_rows, m.d_e(), "antibody")?;
        *out = m.predict(&ag, &ab)?;
        Ok(())
    })
}

/// Maps a standardized score back to pK_d with the checkpoint's scaler.
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dd_model_to_pkd(model: *const DdModel, standardized: f64, out: *mut f64) -> DdStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        *out_arg(out, "out")? = m.unstandardize(standardized)?;
        Ok(())
    })
}

/// A loaded embedding file.
pub struct DdEmbeddings {
    store: EmbeddingStore,
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dd_embeddings_load(path: *const c_char, out: *mut *mut DdEmbeddings) -> DdStatus {
    guard(|| {
        let path = Path::new(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let store = EmbeddingStore::read(path)?;
        *out = Box::into_raw(Box::new(DdEmbeddings { store }));
        Ok(())
    })
}

/// # Safety
/// `store` must come from [`dd_embeddings_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dd_embeddings_free(store: *mut DdEmbeddings) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of sequences in the file; 0 for a null handle.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_embeddings_len(store: *const DdEmbeddings) -> usize {
    store.as_ref().map_or(0, |s| s.store.len())
}

/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_embeddings_d_e(store: *const DdEmbeddings) -> usize {
    store.as_ref().map_or(0, |s| s.store.d_e())
}

/// Cleans the raw sequences, looks both proteins up in `store` and predicts.
/// `out_pkd` may be null; otherwise it receives the pK_d (which requires a
/// scaler in the checkpoint).
///
/// # Safety
/// Handles must be live, strings NUL-terminated, `out_standardized` valid.
#[no_mangle]
pub unsafe extern "C" fn dd_predict_sequences(
    model: *const DdModel,
    store: *const DdEmbeddings,
    antigen: *const c_char,
    heavy: *const c_char,
    light: *const c_char,
    out_standardized: *mut f64,
    out_pkd: *mut f64,
) -> DdStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let s = store.as_ref().ok_or(Failure::Null("store"))?;
        let pair = encode_pair(str_arg(antigen, "antigen")?, str_arg(heavy, "heavy")?, str_arg(light, "light")?)?;
        let out = out_arg(out_standardized, "out_standardized")?;
        s.store.check_d_e(m.d_e())?;
        let z = m.predict(s.store.get(&pair.antigen_id)?, s.store.get(&pair.antibody_id)?)?;
        if let Some(p) = out_pkd.as_mut() {
            *p = m.unstandardize(z)?;
        }
        *out = z;
        Ok(())
    })
}

/// pK_d = 9 - log10(K_d in nM), for K_d inside the accepted range.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dd_kd_to_pkd(kd_nm: f64, out: *mut f64) -> DdStatus {
    guard(|| {
        *out_arg(out, "out")? = kd_to_pkd(kd_nm)?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn dd_pkd_to_kd(pkd: f64) -> f64 {
    pkd_to_kd(pkd)
}

unsafe fn pair_metric(
    f: fn(&[f64], &[f64]) -> Result<f64>,
    x: *const f64,
    y: *const f64,
    n: usize,
    out: *mut f64,
) -> DdStatus {
    guard(|| {
        let x = slice_arg(x, n, "x")?;
        let y = slice_arg(y, n, "y")?;
        *out_arg(out, "out")? = f(x, y)?;
        Ok(())
    })
}

/// # Safety
/// `pred` and `target` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dd_rmse(pred: *const f64, target: *const f64, n: usize, out: *mut f64) -> DdStatus {
    pair_metric(metrics::rmse, pred, target, n, out)
}

/// # Safety
/// As [`dd_rmse`].
#[no_mangle]
pub unsafe extern "C" fn dd_mae(pred: *const f64, target: *const f64, n: usize, out: *mut f64) -> DdStatus {
    pair_metric(metrics::mae, pred, target, n, out)
}

/// # Safety
/// As [`dd_rmse`].
#[no_mangle]
pub unsafe extern "C" fn dd_r2(pred: *const f64, target: *const f64, n: usize, out: *mut f64) -> DdStatus {
    pair_metric(metrics::r2, pred, target, n, out)
}

/// # Safety
/// `x` and `y` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dd_pearson(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> DdStatus {
    pair_metric(metrics::pearson, x, y, n, out)
}

/// # Safety
/// As [`dd_pearson`].
#[no_mangle]
pub unsafe extern "C" fn dd_spearman(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> DdStatus {
    pair_metric(metrics::spearman, x, y, n, out)
}

/// ROC AUC; a nonzero label byte marks a positive.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dd_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> DdStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let l: Vec<bool> = slice_arg(labels, n, "labels")?.iter().map(|&b| b != 0).collect();
        *out_arg(out, "out")? = metrics::roc_auc(s, &l)?;
        Ok(())
    })
}
