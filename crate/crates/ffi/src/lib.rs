//! C ABI over `normline`.
//!
//! Models and datasets are opaque handles created by `nl_*` constructors
//! and released with the matching `*_free`. Every fallible call returns an
//! [`NlStatus`]; on failure [`nl_last_error`] holds a message for the calling
//! thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use normline::data::{generate_synthetic, Dataset, SyntheticSpec};
use normline::features::Batch;
use normline::network::{build_norm_dnn, load_checkpoint, save_checkpoint, Model, ModelConfig, NumericalNormChoice};
use normline::norm::{vo_ln, vo_ln_diag_derivative};
use normline::train::{auc, fit, predict, TrainConfig};
use normline::{Error, Matrix};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Checkpoint = 5,
    Train = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlSplit {
    Train = 0,
    Valid = 1,
    Test = 2,
}

/// Opaque model handle.
pub struct NlModel {
    inner: Model,
}

/// Opaque dataset handle: schema plus train/valid/test splits.
pub struct NlDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> NlStatus {
    match e.category() {
        "config" => NlStatus::Config,
        "data" => NlStatus::Data,
        "checkpoint" => NlStatus::Checkpoint,
        _ => NlStatus::Train,
    }
}

struct Failure(NlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), format!("{}: {e}", e.category()))
    }
}

fn fail(status: NlStatus, msg: &str) -> Failure {
    Failure(status, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            NlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NlStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    Ok(PathBuf::from(str_arg(p)?))
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(NlStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(NlStatus::InvalidArgument, "string argument is not UTF-8"))
}

unsafe fn ref_arg<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(NlStatus::NullPointer, "null handle"))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(NlStatus::NullPointer, "null array argument"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_slice<'a, T>(p: *mut T, n: usize) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(NlStatus::NullPointer, "null output buffer"));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(NlStatus::NullPointer, "null output pointer"));
    }
    out.write(value);
    Ok(())
}

fn split(ds: &Dataset, s: NlSplit) -> &Batch {
    match s {
        NlSplit::Train => &ds.train,
        NlSplit::Valid => &ds.valid,
        NlSplit::Test => &ds.test,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next `nl_*` call on the same thread.
#[no_mangle]
pub extern "C" fn nl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nl_dataset_load(dir: *const c_char, out: *mut *mut NlDataset) -> NlStatus {
    guard(|| {
        let ds = Dataset::load(&path_arg(dir)?)?;
        put(out, Box::into_raw(Box::new(NlDataset { inner: ds })))
    })
}

/// Generates a synthetic long-tail dataset and splits it 8:1:1 with `seed`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nl_dataset_synthetic(
    samples: usize,
    categorical_fields: usize,
    numerical_fields: usize,
    vocab_size: usize,
    zipf_exponent: f64,
    seed: u64,
    out: *mut *mut NlDataset,
) -> NlStatus {
    guard(|| {
        let spec = SyntheticSpec { samples, categorical_fields, numerical_fields, vocab_size, zipf_exponent, seed, ..Default::default() };
        let (ds, _) = generate_synthetic(&spec)?.split(seed)?;
        put(out, Box::into_raw(Box::new(NlDataset { inner: ds })))
    })
}

/// # Safety
/// `ds` must be a handle from this library or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn nl_dataset_free(ds: *mut NlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nl_dataset_len(ds: *const NlDataset, which: NlSplit, out: *mut usize) -> NlStatus {
    guard(|| put(out, split(&ref_arg(ds)?.inner, which).rows()))
}

/// # Safety
/// `ds` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nl_dataset_save(ds: *const NlDataset, dir: *const c_char) -> NlStatus {
    guard(|| Ok(ref_arg(ds)?.inner.save(&path_arg(dir)?)?))
}

/// Builds a model for the dataset's schema. `model_toml` is the body of a
/// `[model]` table (may be empty for defaults).
///
/// # Safety
/// `ds` must be a live handle, `model_toml` a NUL-terminated string and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nl_model_build(ds: *const NlDataset, model_toml: *const c_char, seed: u64, out: *mut *mut NlModel) -> NlStatus {
    guard(|| {
        let cfg = ModelConfig::from_toml(str_arg(model_toml)?)?;
        let model = Model::build(&cfg, &ref_arg(ds)?.inner.schema, seed)?;
        put(out, Box::into_raw(Box::new(NlModel { inner: model })))
    })
}

/// NormDNN for the dataset's schema. `numerical_layer_norm` selects
/// LayerNorm instead of VO-LN for numerical fields.
///
/// # Safety
/// `ds` must be a live handle, `hidden` must point to `n_hidden` widths and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nl_model_build_norm_dnn(
    ds: *const NlDataset,
    embedding_dim: usize,
    hidden: *const usize,
    n_hidden: usize,
    numerical_layer_norm: bool,
    seed: u64,
    out: *mut *mut NlModel,
) -> NlStatus {
    guard(|| {
        let choice = if numerical_layer_norm { NumericalNormChoice::LayerNorm } else { NumericalNormChoice::VarianceOnlyLn };
        let model = build_norm_dnn(&ref_arg(ds)?.inner.schema, embedding_dim, slice_arg(hidden, n_hidden)?, choice, seed)?;
        put(out, Box::into_raw(Box::new(NlModel { inner: model })))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nl_model_load(path: *const c_char, out: *mut *mut NlModel) -> NlStatus {
    guard(|| {
        let model = load_checkpoint(&path_arg(path)?)?;
        put(out, Box::into_raw(Box::new(NlModel { inner: model })))
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nl_model_save(model: *const NlModel, path: *const c_char) -> NlStatus {
    guard(|| Ok(save_checkpoint(&ref_arg(model)?.inner, &path_arg(path)?)?))
}

/// # Safety
/// `model` must be a handle from this library or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn nl_model_free(model: *mut NlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Eval-mode click probabilities for every row of a split. `out` must hold
/// at least as many values as the split has rows; `written` receives the
/// row count either way.
///
/// # Safety
/// Handles must be live; `out` must point to `capacity` doubles and
/// `written` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nl_model_predict(
    model: *const NlModel,
    ds: *const NlDataset,
    which: NlSplit,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> NlStatus {
    guard(|| {
        let batch = split(&ref_arg(ds)?.inner, which);
        put(written, batch.rows())?;
        if capacity < batch.rows() {
            return Err(fail(NlStatus::BufferTooSmall, &format!("need room for {} values", batch.rows())));
        }
        let probs = predict(&ref_arg(model)?.inner, batch, 1000)?;
        out_slice(out, probs.len())?.copy_from_slice(&probs);
        Ok(())
    })
}

/// Trains on the train split with early stopping on the valid split and
/// replaces the model by its best epoch. `train_toml` is the body of a
/// `[train]` table.
///
/// # Safety
/// Handles must be live, `train_toml` NUL-terminated, and
/// `best_valid_auc` a valid pointer or null.
#[no_mangle]
pub unsafe extern "C" fn nl_model_train(
    model: *mut NlModel,
    ds: *const NlDataset,
    train_toml: *const c_char,
    best_valid_auc: *mut f64,
) -> NlStatus {
    guard(|| {
        let cfg = TrainConfig::from_toml(str_arg(train_toml)?)?;
        let ds = &ref_arg(ds)?.inner;
        let handle = model.as_mut().ok_or_else(|| fail(NlStatus::NullPointer, "null handle"))?;
        let result = fit(handle.inner.clone(), &ds.train, &ds.valid, &cfg)?;
        handle.inner = result.model;
        if !best_valid_auc.is_null() {
            best_valid_auc.write(result.best_valid_auc);
        }
        Ok(())
    })
}

/// Rank-based AUC; labels must be 0 or 1 and both classes present.
///
/// # Safety
/// `scores` and `labels` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nl_auc(scores: *const f64, labels: *const f64, n: usize, out: *mut f64) -> NlStatus {
    guard(|| put(out, auc(slice_arg(scores, n)?, slice_arg(labels, n)?)?))
}

/// Variance-only LayerNorm of a row-major `rows × cols` matrix.
///
/// # Safety
/// `x` and `out` must each point to `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn nl_vo_ln_forward(x: *const f64, rows: usize, cols: usize, eps: f64, out: *mut f64) -> NlStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or_else(|| fail(NlStatus::InvalidArgument, "matrix too large"))?;
        let m = Matrix::new(rows, cols, slice_arg(x, n)?.to_vec())?;
        out_slice(out, n)?.copy_from_slice(vo_ln(&m, eps)?.as_slice());
        Ok(())
    })
}

/// Diagonal of the VO-LN Jacobian for one vector.
///
/// # Safety
/// `x` and `out` must each point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn nl_vo_ln_diag_derivative(x: *const f64, n: usize, eps: f64, out: *mut f64) -> NlStatus {
    guard(|| {
        if n == 0 {
            return Err(fail(NlStatus::InvalidArgument, "empty vector"));
        }
        out_slice(out, n)?.copy_from_slice(&vo_ln_diag_derivative(slice_arg(x, n)?, eps));
        Ok(())
    })
}
