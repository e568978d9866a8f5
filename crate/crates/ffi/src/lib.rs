//! C ABI for `pointpwc`.
//!
//! Models are opaque `PpwcModel` handles created by `ppwc_model_new` or
//! `ppwc_model_load` and released with `ppwc_model_free`. Every fallible
//! function returns a `PpwcStatus`; on failure `ppwc_last_error_message`
//! describes the error for the calling thread. Point buffers are row-major
//! `n x 3` arrays of `double`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pointpwc::autodiff::{Graph, Tensor};
use pointpwc::geom::{PointCloud, SceneFlow};
use pointpwc::harness::evaluate;
use pointpwc::io::Checkpoint;
use pointpwc::losses::chamfer_loss;
use pointpwc::network::{Network, NetworkConfig};
use pointpwc::Error;

/// Result code of every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PpwcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    TooFewPoints = 4,
    NonFinite = 5,
    Checkpoint = 6,
    Io = 7,
    Panic = 8,
}

/// Scene flow metrics, same definitions as the `eval` command.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpwcMetrics {
    pub epe3d: f64,
    pub acc_strict: f64,
    pub acc_relaxed: f64,
    pub outlier: f64,
}

/// Opaque model handle.
pub struct PpwcModel {
    network: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> PpwcStatus {
    match e {
        Error::Config(_) => PpwcStatus::Config,
        Error::TooFewPoints { .. } => PpwcStatus::TooFewPoints,
        Error::NonFinite { .. } => PpwcStatus::NonFinite,
        Error::CheckpointMismatch { .. } | Error::Format { .. } => PpwcStatus::Checkpoint,
        Error::Io { .. } => PpwcStatus::Io,
        _ => PpwcStatus::InvalidArgument,
    }
}

struct Failure(PpwcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PpwcStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PpwcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PpwcStatus::Ok,
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
            set_error(format!("internal panic: {msg}"));
            PpwcStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        Failure(
            PpwcStatus::InvalidArgument,
            format!("{what} is not valid UTF-8"),
        )
    })
}

unsafe fn rows(ptr: *const f64, n: usize, what: &str) -> Result<Vec<[f64; 3]>, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let flat = std::slice::from_raw_parts(ptr, n * 3);
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

unsafe fn network_config(json: *const c_char) -> Result<NetworkConfig, Failure> {
    if json.is_null() {
        return Ok(NetworkConfig::default());
    }
    let text = c_str(json, "config_json")?;
    let cfg: NetworkConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn model<'a>(m: *const PpwcModel) -> Result<&'a PpwcModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn ppwc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn ppwc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Creates a freshly initialised model. `config_json` is a network config
/// object (null selects the defaults).
///
/// # Safety
/// `config_json` must be null or a nul-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ppwc_model_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut PpwcModel,
) -> PpwcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let network = Network::new(network_config(config_json)?, seed)?;
        *out = Box::into_raw(Box::new(PpwcModel { network }));
        Ok(())
    })
}

/// Loads a checkpoint written by `ppwc_model_save` or the `train` command.
/// `config_json` must describe the same architecture.
///
/// # Safety
/// String arguments must be null (config only) or nul-terminated; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ppwc_model_load(
    config_json: *const c_char,
    path: *const c_char,
    out: *mut *mut PpwcModel,
) -> PpwcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = network_config(config_json)?;
        let path = PathBuf::from(c_str(path, "path")?);
        let mut network = Network::new(cfg, 0)?;
        Checkpoint::load(&path)?.restore(&mut network.params, None)?;
        *out = Box::into_raw(Box::new(PpwcModel { network }));
        Ok(())
    })
}

/// Writes the model parameters as a checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn ppwc_model_save(
    model_ptr: *const PpwcModel,
    path: *const c_char,
) -> PpwcStatus {
    guard(|| {
        let m = model(model_ptr)?;
        let path = PathBuf::from(c_str(path, "path")?);
        Checkpoint::from_state(&m.network.params, None, 0).save(&path)?;
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ppwc_model_free(model: *mut PpwcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Smallest cloud size the model accepts.
///
/// # Safety
/// `model` must be null or a live handle (null returns 0).
#[no_mangle]
pub unsafe extern "C" fn ppwc_model_min_points(model: *const PpwcModel) -> usize {
    model.as_ref().map_or(0, |m| m.network.config.min_points())
}

/// Predicts the full-resolution flow of `p` (n1 points) towards `q` (n2
/// points) into `flow_out` (n1 x 3).
///
/// # Safety
/// Buffers must hold the stated number of rows.
#[no_mangle]
pub unsafe extern "C" fn ppwc_infer(
    model_ptr: *const PpwcModel,
    p: *const f64,
    n1: usize,
    q: *const f64,
    n2: usize,
    flow_out: *mut f64,
) -> PpwcStatus {
    guard(|| {
        let m = model(model_ptr)?;
        let p = PointCloud::new(rows(p, n1, "p")?)?;
        let q = PointCloud::new(rows(q, n2, "q")?)?;
        if flow_out.is_null() {
            return Err(null("flow_out"));
        }
        let flow = m.network.infer(&p, &q)?;
        let out = std::slice::from_raw_parts_mut(flow_out, n1 * 3);
        for (dst, v) in out.chunks_exact_mut(3).zip(flow.vectors()) {
            dst.copy_from_slice(v);
        }
        Ok(())
    })
}

/// Compares predicted against ground-truth flow (both n x 3).
///
/// # Safety
/// Buffers must hold `n` rows; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ppwc_evaluate(
    pred: *const f64,
    gt: *const f64,
    n: usize,
    out: *mut PpwcMetrics,
) -> PpwcStatus {
    guard(|| {
        let pred = SceneFlow::new(rows(pred, n, "pred")?)?;
        let gt = SceneFlow::new(rows(gt, n, "gt")?)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = evaluate(&pred, &gt)?;
        *out = PpwcMetrics {
            epe3d: m.epe3d,
            acc_strict: m.acc_strict,
            acc_relaxed: m.acc_relaxed,
            outlier: m.outlier,
        };
        Ok(())
    })
}

/// Chamfer distance between two clouds, the same value the training loss uses.
///
/// # Safety
/// Buffers must hold the stated number of rows; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ppwc_chamfer(
    p: *const f64,
    n1: usize,
    q: *const f64,
    n2: usize,
    out: *mut f64,
) -> PpwcStatus {
    guard(|| {
        let p = PointCloud::new(rows(p, n1, "p")?)?;
        let q = PointCloud::new(rows(q, n2, "q")?)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let g = Graph::new();
        let pv = g.leaf(Tensor::from_points(p.points()));
        let qv = g.leaf(Tensor::from_points(q.points()));
        *out = g.item(chamfer_loss(&g, pv, qv)?);
        Ok(())
    })
}
