//! C ABI for the sfk library.
//!
//! Handles are opaque pointers created and freed by this library; every
//! fallible call returns an [`SfkStatus`] and leaves a human-readable
//! message retrievable via [`sfk_last_error_message`] on failure. Buffers
//! are caller-allocated.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use sfk::cli::{train_config, Config};
use sfk::datagen::{generate_dataset, read_dataset, write_dataset, GeneratorParams, SnapshotDataset};
use sfk::metrics::structure_scores;
use sfk::nets::{extract_graph, InterventionMask};
use sfk::numerics::Mat;
use sfk::rollout::{rollout_ode, RolloutConfig};
use sfk::trainer::{load_checkpoint, save_checkpoint, train, Checkpoint, Model};
use sfk::SfkError;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    ParseError = 5,
    BufferTooSmall = 6,
}

/// Opaque snapshot dataset handle.
pub struct SfkDataset {
    inner: SnapshotDataset,
}

/// Opaque trained-model handle.
pub struct SfkModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &SfkError) -> SfkStatus {
    set_error(&err.to_string());
    match err {
        SfkError::Io { .. } => SfkStatus::Io,
        SfkError::Parse { .. } => SfkStatus::ParseError,
        SfkError::NonFinite(_) | SfkError::Diverged(_) => SfkStatus::Numeric,
        _ => SfkStatus::InvalidArgument,
    }
}

fn null_arg(what: &str) -> SfkStatus {
    set_error(&format!("null pointer: {}", what));
    SfkStatus::NullPointer
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, SfkStatus> {
    if ptr.is_null() {
        return Err(null_arg(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{} is not valid UTF-8", what));
        SfkStatus::InvalidArgument
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sfk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sfk_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generate a synthetic linear snapshot dataset. `knockouts` may be NULL
/// when `n_knockouts` is 0. On success `*out` owns the new handle.
///
/// # Safety
/// `out` must be a valid pointer; `knockouts` must point to `n_knockouts`
/// readable elements when non-NULL.
#[no_mangle]
pub unsafe extern "C" fn sfk_dataset_generate(
    d: usize,
    sparsity: f64,
    timepoints: usize,
    samples: usize,
    sigma: f64,
    horizon: f64,
    dt: f64,
    damping: bool,
    knockouts: *const usize,
    n_knockouts: usize,
    seed: u64,
    out: *mut *mut SfkDataset,
) -> SfkStatus {
    if out.is_null() {
        return null_arg("out");
    }
    if knockouts.is_null() && n_knockouts > 0 {
        return null_arg("knockouts");
    }
    let kos = if n_knockouts == 0 {
        Vec::new()
    } else {
        std::slice::from_raw_parts(knockouts, n_knockouts).to_vec()
    };
    let params = GeneratorParams {
        d,
        sparsity,
        timepoints,
        samples,
        sigma,
        horizon,
        dt,
        damping,
        knockouts: kos,
        seed,
    };
    match generate_dataset(&params) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(SfkDataset { inner: ds }));
            SfkStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Read a dataset directory written by the CLI or [`sfk_dataset_write`].
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfk_dataset_read(path: *const c_char, out: *mut *mut SfkDataset) -> SfkStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let path = match cstr_arg(path, "path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    match read_dataset(Path::new(path)) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(SfkDataset { inner: ds }));
            SfkStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Write a dataset to a directory.
///
/// # Safety
/// `ds` must be a live handle from this library; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn sfk_dataset_write(ds: *const SfkDataset, path: *const c_char) -> SfkStatus {
    let Some(ds) = ds.as_ref() else {
        return null_arg("ds");
    };
    let path = match cstr_arg(path, "path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    match write_dataset(&ds.inner, Path::new(path)) {
        Ok(()) => SfkStatus::Ok,
        Err(e) => status_of(&e),
    }
}

/// Number of variables in the dataset; 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfk_dataset_dim(ds: *const SfkDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.d)
}

/// Number of conditions in the dataset; 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfk_dataset_conditions(ds: *const SfkDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.conditions.len())
}

/// Copy the ground-truth graph (row-major d*d) into `out_buf`. Fails with
/// `InvalidArgument` when the dataset has no ground truth.
///
/// # Safety
/// `ds` must be a live handle; `out_buf` must hold `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn sfk_dataset_graph(ds: *const SfkDataset, out_buf: *mut f64, len: usize) -> SfkStatus {
    let Some(ds) = ds.as_ref() else {
        return null_arg("ds");
    };
    if out_buf.is_null() {
        return null_arg("out_buf");
    }
    let Some(graph) = &ds.inner.graph else {
        set_error("dataset carries no ground-truth graph");
        return SfkStatus::InvalidArgument;
    };
    let need = graph.rows() * graph.cols();
    if len < need {
        set_error(&format!("graph buffer holds {}, need {}", len, need));
        return SfkStatus::BufferTooSmall;
    }
    std::ptr::copy_nonoverlapping(graph.as_slice().as_ptr(), out_buf, need);
    SfkStatus::Ok
}

/// Free a dataset handle (NULL is a no-op).
///
/// # Safety
/// `ds` must be NULL or a pointer previously returned by this library and
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfk_dataset_free(ds: *mut SfkDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Train on a dataset. `config_text` uses the CLI config syntax (a `[train]`
/// section of key=value lines) and may be NULL for defaults.
///
/// # Safety
/// `ds` must be a live handle; `out` a valid pointer; `config_text` NULL or
/// a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sfk_train(
    ds: *const SfkDataset,
    config_text: *const c_char,
    seed: u64,
    out: *mut *mut SfkModel,
) -> SfkStatus {
    let Some(ds) = ds.as_ref() else {
        return null_arg("ds");
    };
    if out.is_null() {
        return null_arg("out");
    }
    let cfg = if config_text.is_null() {
        Config::default()
    } else {
        let text = match cstr_arg(config_text, "config_text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match Config::parse(text, "<ffi config>") {
            Ok(c) => c,
            Err(e) => return status_of(&e),
        }
    };
    let config = match train_config(&cfg, seed) {
        Ok(c) => c,
        Err(e) => return status_of(&e),
    };
    match train(&ds.inner, &config) {
        Ok((model, report)) => {
            if let Some(reason) = report.aborted {
                set_error(&reason);
                return SfkStatus::Numeric;
            }
            *out = Box::into_raw(Box::new(SfkModel { inner: model }));
            SfkStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Number of variables the model was trained on; 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfk_model_dim(model: *const SfkModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.ngm.d)
}

/// Copy the inferred graph (row-major d*d, entry (j,i) = influence of i on
/// j) into `out_buf`.
///
/// # Safety
/// `model` must be a live handle; `out_buf` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn sfk_model_graph(model: *const SfkModel, out_buf: *mut f64, len: usize) -> SfkStatus {
    let Some(model) = model.as_ref() else {
        return null_arg("model");
    };
    if out_buf.is_null() {
        return null_arg("out_buf");
    }
    let graph = extract_graph(&model.inner.ngm);
    let need = graph.rows() * graph.cols();
    if len < need {
        set_error(&format!("graph buffer holds {}, need {}", len, need));
        return SfkStatus::BufferTooSmall;
    }
    std::ptr::copy_nonoverlapping(graph.as_slice().as_ptr(), out_buf, need);
    SfkStatus::Ok
}

/// Integrate the learned deterministic dynamics over one unit segment.
/// `x0`/`x_out` are row-major `n x d`; `knockout < 0` means observational.
///
/// # Safety
/// `model` must be a live handle; `x0` must hold `n*d` readable and `x_out`
/// `n*d` writable elements.
#[no_mangle]
pub unsafe extern "C" fn sfk_model_rollout(
    model: *const SfkModel,
    x0: *const f64,
    n: usize,
    segment: usize,
    knockout: i64,
    steps: usize,
    x_out: *mut f64,
) -> SfkStatus {
    let Some(model) = model.as_ref() else {
        return null_arg("model");
    };
    if x0.is_null() || x_out.is_null() {
        return null_arg("x0/x_out");
    }
    let d = model.inner.ngm.d;
    let data = std::slice::from_raw_parts(x0, n * d).to_vec();
    let start = match Mat::from_vec(n, d, data) {
        Ok(m) => m,
        Err(e) => return status_of(&e),
    };
    let ko = if knockout < 0 { None } else { Some(knockout as usize) };
    let mask = match InterventionMask::from_knockout(d, ko) {
        Ok(m) => m,
        Err(e) => return status_of(&e),
    };
    let cfg = RolloutConfig {
        steps,
        sigma: if model.inner.flow_only { 0.0 } else { model.inner.sigma },
        ..RolloutConfig::default()
    };
    match rollout_ode(&model.inner.ngm, &model.inner.score, &start, segment, &mask, &cfg) {
        Ok(endpoint) => {
            std::ptr::copy_nonoverlapping(endpoint.as_slice().as_ptr(), x_out, n * d);
            SfkStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Save the model as a versioned JSON checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn sfk_model_save(model: *const SfkModel, path: *const c_char) -> SfkStatus {
    let Some(model) = model.as_ref() else {
        return null_arg("model");
    };
    let path = match cstr_arg(path, "path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    match save_checkpoint(Path::new(path), &Checkpoint::new(&model.inner, None, 0)) {
        Ok(()) => SfkStatus::Ok,
        Err(e) => status_of(&e),
    }
}

/// Load a model from a checkpoint file.
///
/// # Safety
/// `path` must be a valid string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sfk_model_load(path: *const c_char, out: *mut *mut SfkModel) -> SfkStatus {
    if out.is_null() {
        return null_arg("out");
    }
    let path = match cstr_arg(path, "path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_checkpoint(Path::new(path)) {
        Ok(ckpt) => {
            *out = Box::into_raw(Box::new(SfkModel { inner: ckpt.model }));
            SfkStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Free a model handle (NULL is a no-op).
///
/// # Safety
/// `model` must be NULL or a pointer previously returned by this library
/// and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sfk_model_free(model: *mut SfkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// AUROC and AP of predicted edge scores against a binarized ground truth,
/// both row-major d*d, diagonal excluded.
///
/// # Safety
/// `predicted` and `truth` must hold `d*d` readable elements; the output
/// pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sfk_structure_scores(
    predicted: *const f64,
    truth: *const f64,
    d: usize,
    out_auroc: *mut f64,
    out_ap: *mut f64,
) -> SfkStatus {
    if predicted.is_null() || truth.is_null() || out_auroc.is_null() || out_ap.is_null() {
        return null_arg("predicted/truth/out_auroc/out_ap");
    }
    let p = match Mat::from_vec(d, d, std::slice::from_raw_parts(predicted, d * d).to_vec()) {
        Ok(m) => m,
        Err(e) => return status_of(&e),
    };
    let t = match Mat::from_vec(d, d, std::slice::from_raw_parts(truth, d * d).to_vec()) {
        Ok(m) => m,
        Err(e) => return status_of(&e),
    };
    match structure_scores(&p, &t) {
        Ok(s) => {
            *out_auroc = s.auroc;
            *out_ap = s.ap;
            SfkStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}
