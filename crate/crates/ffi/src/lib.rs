//! C interface to unitquant.
//!
//! Every function returns a [`UqStatus`]; on failure the message is available
//! from [`uq_last_error`] on the same thread. Models are opaque [`UqModel`]
//! handles released with [`uq_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use unitquant::calib::{calibrate, CalibConfig, CalibData, Method};
use unitquant::model::{fold_batchnorm, load_model, save_model};
use unitquant::{Error, ModelGraph, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    Parameter = 3,
    Dimension = 4,
    Structure = 5,
    Data = 6,
    Io = 7,
    Format = 8,
    NonFinite = 9,
    Size = 10,
    State = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UqMethod {
    Rtn = 0,
    Layerwise = 1,
    Unitwise = 2,
}

impl From<UqMethod> for Method {
    fn from(m: UqMethod) -> Self {
        match m {
            UqMethod::Rtn => Method::Rtn,
            UqMethod::Layerwise => Method::Layerwise,
            UqMethod::Unitwise => Method::Unitwise,
        }
    }
}

/// Opaque model handle.
pub struct UqModel {
    graph: ModelGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> UqStatus {
    match e {
        Error::Dimension { .. } => UqStatus::Dimension,
        Error::Parameter(_) => UqStatus::Parameter,
        Error::Structure(_) => UqStatus::Structure,
        Error::State(_) => UqStatus::State,
        Error::Data(_) | Error::DatasetMissing { .. } | Error::BadMagic { .. } | Error::Truncated { .. } => {
            UqStatus::Data
        }
        Error::Size { .. } => UqStatus::Size,
        Error::NonFinite { .. } => UqStatus::NonFinite,
        Error::MalformedManifest(_) | Error::BlobLength { .. } | Error::UnknownLayerKind { .. } | Error::Json(_) => {
            UqStatus::Format
        }
        Error::Io(_) => UqStatus::Io,
    }
}

struct Fail(UqStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            UqStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            UqStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(UqStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(UqStatus::InvalidString, format!("{what} is not valid UTF-8")))
}

unsafe fn model_ref<'a>(m: *const UqModel) -> Result<&'a UqModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn emit(out: *mut *mut UqModel, graph: ModelGraph) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    unsafe { *out = Box::into_raw(Box::new(UqModel { graph })) };
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn uq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uq_model_load(path: *const c_char, out: *mut *mut UqModel) -> UqStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        emit(out, load_model(&p)?)
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn uq_model_save(model: *const UqModel, path: *const c_char) -> UqStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = path_arg(path, "path")?;
        save_model(&m.graph, &p)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn uq_model_free(model: *mut UqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of floats in one input sample.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uq_model_input_len(model: *const UqModel, out: *mut usize) -> UqStatus {
    guard(|| {
        let m = model_ref(model)?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = m.graph.input_shape.iter().product();
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uq_model_classes(model: *const UqModel, out: *mut usize) -> UqStatus {
    guard(|| {
        let m = model_ref(model)?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = m.graph.classes;
        Ok(())
    })
}

/// New handle with batch norm folded into the preceding layers.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uq_model_fold(model: *const UqModel, out: *mut *mut UqModel) -> UqStatus {
    guard(|| {
        let m = model_ref(model)?;
        emit(out, fold_batchnorm(&m.graph)?)
    })
}

unsafe fn input_tensor(graph: &ModelGraph, inputs: *const f32, n: usize) -> Result<Tensor, Fail> {
    if inputs.is_null() {
        return Err(null("inputs"));
    }
    let per: usize = graph.input_shape.iter().product();
    let mut shape = vec![n];
    shape.extend(&graph.input_shape);
    Ok(Tensor::new(shape, std::slice::from_raw_parts(inputs, n * per).to_vec())?)
}

/// Logits for `n` samples laid out contiguously in NCHW order.
///
/// # Safety
/// `inputs` holds `n * input_len` floats; `logits` has room for `logits_len`
/// floats, which must equal `n * classes`.
#[no_mangle]
pub unsafe extern "C" fn uq_model_forward(
    model: *const UqModel,
    inputs: *const f32,
    n: usize,
    logits: *mut f32,
    logits_len: usize,
) -> UqStatus {
    guard(|| {
        let m = model_ref(model)?;
        if logits.is_null() {
            return Err(null("logits"));
        }
        if logits_len != n * m.graph.classes {
            return Err(Fail(
                UqStatus::Dimension,
                format!("logits buffer holds {logits_len} floats, need {}", n * m.graph.classes),
            ));
        }
        let x = input_tensor(&m.graph, inputs, n)?;
        let y = m.graph.forward(&x)?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Folds batch norm and quantizes with `method` on `n` calibration samples.
/// `labels` may be null when the configuration does not need them;
/// `config_json` may be null for defaults.
///
/// # Safety
/// Pointers must be valid for the sizes implied by `n` and the model.
#[no_mangle]
pub unsafe extern "C" fn uq_quantize(
    model: *const UqModel,
    inputs: *const f32,
    labels: *const u32,
    n: usize,
    config_json: *const c_char,
    method: UqMethod,
    out: *mut *mut UqModel,
) -> UqStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input_tensor(&m.graph, inputs, n)?;
        let labels: Option<Vec<usize>> =
            (!labels.is_null()).then(|| std::slice::from_raw_parts(labels, n).iter().map(|&l| l as usize).collect());
        let cfg: CalibConfig = if config_json.is_null() {
            CalibConfig::default()
        } else {
            let s = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Fail(UqStatus::InvalidString, "config is not valid UTF-8".into()))?;
            serde_json::from_str(s).map_err(|e| Fail(UqStatus::Parameter, format!("config: {e}")))?
        };
        let folded = fold_batchnorm(&m.graph)?;
        let data = CalibData {
            inputs: &x,
            labels: labels.as_deref(),
        };
        let (q, _) = calibrate(&folded, data, &cfg, method.into())?;
        emit(out, q)
    })
}
