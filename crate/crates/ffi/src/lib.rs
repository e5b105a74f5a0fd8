//! C ABI over `urn-core`: model loading and inference through an opaque
//! handle, plus the scoring and uncertainty primitives.
//!
//! Every fallible function returns a [`UrnStatus`]; on failure the message
//! is available from [`urn_last_error`] on the same thread until the next
//! failing call. Images are `[3, H, W]` row-major `double` buffers in
//! `[0, 1]`, maps are `[H, W]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use urn_core::metrics::{self, ConfusionCounts};
use urn_core::stage1::{summarize, NetworkConfig};
use urn_core::tensor::Tensor;
use urn_core::uggc::{build_edges, normalize, EdgeStrategy, Grid};
use urn_core::urn::UrnModel;
use urn_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UrnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    SingleClass = 6,
    Panic = 7,
    Other = 8,
}

/// Opaque model handle.
pub struct UrnHandle {
    model: UrnModel,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UrnConfusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl From<ConfusionCounts> for UrnConfusion {
    fn from(c: ConfusionCounts) -> Self {
        Self {
            tp: c.tp,
            tn: c.tn,
            fp: c.fp,
            fn_: c.fn_,
        }
    }
}

impl From<UrnConfusion> for ConfusionCounts {
    fn from(c: UrnConfusion) -> Self {
        ConfusionCounts::new(c.tp, c.tn, c.fp, c.fn_)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> UrnStatus {
    match e {
        Error::Shape(_) => UrnStatus::Shape,
        Error::InvalidArgument(_) | Error::Geometry(_) => UrnStatus::InvalidArgument,
        Error::Io { .. } | Error::MissingFile(_) | Error::Load { .. } | Error::MissingMask(_) | Error::Image(_) => {
            UrnStatus::Io
        }
        Error::Checkpoint(_) | Error::Json(_) | Error::NonFinite { .. } => UrnStatus::Checkpoint,
        Error::SingleClass => UrnStatus::SingleClass,
        _ => UrnStatus::Other,
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (UrnStatus, String)>) -> UrnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UrnStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            UrnStatus::Panic
        }
    }
}

fn core(e: Error) -> (UrnStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (UrnStatus, String) {
    (UrnStatus::NullPointer, format!("`{what}` is null"))
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (UrnStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (UrnStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn string<'a>(s: *const c_char, what: &str) -> Result<&'a str, (UrnStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (UrnStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn urn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a trained model from a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn urn_model_load(dir: *const c_char, out: *mut *mut UrnHandle) -> UrnStatus {
    guard(|| {
        let dir = string(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = UrnModel::load(Path::new(dir)).map_err(core)?;
        *out = Box::into_raw(Box::new(UrnHandle { model }));
        Ok(())
    })
}

/// Builds an untrained model from a network config in JSON (fields as in
/// `network.json`; missing fields take the desk-scale defaults).
///
/// # Safety
/// `config_json` must be NUL-terminated; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn urn_model_new(config_json: *const c_char, seed: u64, out: *mut *mut UrnHandle) -> UrnStatus {
    guard(|| {
        let text = string(config_json, "config_json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: NetworkConfig = serde_json::from_str(text).map_err(|e| (UrnStatus::InvalidArgument, format!("bad network config: {e}")))?;
        let model = UrnModel::new(&cfg, seed).map_err(core)?;
        *out = Box::into_raw(Box::new(UrnHandle { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `handle` must come from `urn_model_load`/`urn_model_new` and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn urn_model_free(handle: *mut UrnHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Input height and width the model expects.
///
/// # Safety
/// `handle` must be live; `h` and `w` valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn urn_model_input_size(handle: *const UrnHandle, h: *mut usize, w: *mut usize) -> UrnStatus {
    guard(|| {
        let m = handle.as_ref().ok_or_else(|| null("handle"))?;
        if h.is_null() || w.is_null() {
            return Err(null("h/w"));
        }
        (*h, *w) = m.model.cfg.input_size;
        Ok(())
    })
}

/// Coarse mask, uncertainty and refined mask for one image of the model's
/// input size. Any output pointer may be null to skip it.
///
/// # Safety
/// `image` must hold `3·h·w` doubles; non-null outputs `h·w` each.
#[no_mangle]
pub unsafe extern "C" fn urn_model_infer(
    handle: *const UrnHandle,
    image: *const f64,
    h: usize,
    w: usize,
    seed: u64,
    y_m: *mut f64,
    y_u: *mut f64,
    y_v: *mut f64,
) -> UrnStatus {
    guard(|| {
        let m = handle.as_ref().ok_or_else(|| null("handle"))?;
        let x = Tensor::new([3, h, w], slice(image, 3 * h * w, "image")?.to_vec());
        let out = m.model.infer(&x, seed).map_err(core)?;
        for (dst, src) in [(y_m, &out.y_m), (y_u, &out.y_u), (y_v, &out.y_v)] {
            if !dst.is_null() {
                slice_mut(dst, h * w, "output")?.copy_from_slice(src.data());
            }
        }
        Ok(())
    })
}

/// Pixelwise mean and uncertainty of `n` stacked maps of `len` pixels.
///
/// # Safety
/// `samples` must hold `n·len` doubles; `mean` and `unc` `len` each.
#[no_mangle]
pub unsafe extern "C" fn urn_summarize(samples: *const f64, n: usize, len: usize, mean: *mut f64, unc: *mut f64) -> UrnStatus {
    guard(|| {
        let data = slice(samples, n * len, "samples")?;
        let maps: Vec<Tensor> = data.chunks(len.max(1)).take(n).map(|c| Tensor::new([len], c.to_vec())).collect();
        let (m, u) = summarize(&maps).map_err(core)?;
        slice_mut(mean, len, "mean")?.copy_from_slice(m.data());
        slice_mut(unc, len, "unc")?.copy_from_slice(u.data());
        Ok(())
    })
}

/// Confusion counts of `pred ≥ thr` against the binary `gt`.
///
/// # Safety
/// `pred` and `gt` must hold `len` doubles; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn urn_confusion(pred: *const f64, gt: *const f64, len: usize, thr: f64, out: *mut UrnConfusion) -> UrnStatus {
    guard(|| {
        let p = Tensor::new([len], slice(pred, len, "pred")?.to_vec());
        let g = Tensor::new([len], slice(gt, len, "gt")?.to_vec());
        let c = metrics::confusion(&p, &g, thr).map_err(core)?;
        *out.as_mut().ok_or_else(|| null("out"))? = c.into();
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn urn_f1(c: UrnConfusion) -> f64 {
    metrics::f1(&c.into())
}

#[no_mangle]
pub extern "C" fn urn_mcc(c: UrnConfusion) -> f64 {
    metrics::mcc(&c.into())
}

/// Rank AUC of `scores` against 0/1 `labels`; `URN_STATUS_SINGLE_CLASS`
/// when only one class is present.
///
/// # Safety
/// `scores` and `labels` must hold `n` entries; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn urn_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> UrnStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&v| v != 0).collect();
        *out.as_mut().ok_or_else(|| null("out"))? = metrics::auc(s, &l).map_err(core)?;
        Ok(())
    })
}

/// Dense normalized propagation operator (`N × N`, `N = rows·cols`) of the
/// local uncertainty-guided graph over node uncertainties `u`.
///
/// # Safety
/// `u` must hold `N` doubles and `out` `N·N`.
#[no_mangle]
pub unsafe extern "C" fn urn_uggc_operator(u: *const f64, rows: usize, cols: usize, out: *mut f64) -> UrnStatus {
    guard(|| {
        let n = rows * cols;
        if n == 0 {
            return Err((UrnStatus::InvalidArgument, "empty grid".into()));
        }
        let u = slice(u, n, "u")?;
        let a = build_edges(u, Grid { rows, cols }, EdgeStrategy::LocalUgc, None);
        slice_mut(out, n * n, "out")?.copy_from_slice(&normalize(&a).to_dense());
        Ok(())
    })
}
