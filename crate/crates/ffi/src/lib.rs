//! C ABI for loading camforge models and computing heatmaps.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible call returns a
//! [`CfStatus`]; on failure [`cf_last_error`] describes the most recent error
//! on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use camforge::cam::{
    activation_profile, explain, CamRequest, ClassSelector, LayerSelection, Method,
};
use camforge::model_io::load_model;
use camforge::{Error, Network, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Bounds = 5,
    Image = 6,
    Shape = 7,
    Numeric = 8,
    Range = 9,
    Argument = 10,
    Consistency = 11,
    Config = 12,
    Tag = 13,
    Training = 14,
    BufferTooSmall = 15,
    Panic = 16,
}

/// CAM method selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfMethod {
    GradCam = 0,
    GradCamPlusPlus = 1,
    ScoreCam = 2,
    LayerCam = 3,
    CombiCam = 4,
}

impl From<CfMethod> for Method {
    fn from(m: CfMethod) -> Method {
        match m {
            CfMethod::GradCam => Method::GradCam,
            CfMethod::GradCamPlusPlus => Method::GradCamPlusPlus,
            CfMethod::ScoreCam => Method::ScoreCam,
            CfMethod::LayerCam => Method::LayerCam,
            CfMethod::CombiCam => Method::CombiCam,
        }
    }
}

/// A loaded network.
pub struct CfNetwork {
    net: Network,
}

/// An input-aligned heatmap.
pub struct CfHeatmap {
    values: Tensor,
    class_index: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> CfStatus {
    match err {
        Error::Shape(_) => CfStatus::Shape,
        Error::Numeric(_) => CfStatus::Numeric,
        Error::Range(_) => CfStatus::Range,
        Error::Argument(_) => CfStatus::Argument,
        Error::Consistency(_) => CfStatus::Consistency,
        Error::Config(_) => CfStatus::Config,
        Error::Parse { .. } => CfStatus::Parse,
        Error::Bounds(_) => CfStatus::Bounds,
        Error::Tag(_) => CfStatus::Tag,
        Error::Image(_) => CfStatus::Image,
        Error::Training { .. } => CfStatus::Training,
        Error::Io { .. } => CfStatus::Io,
    }
}

struct Fail(CfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CfStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn network<'a>(n: *const CfNetwork) -> Result<&'a Network, Fail> {
    n.as_ref().map(|n| &n.net).ok_or_else(|| null("network"))
}

unsafe fn input_tensor(net: &Network, data: *const f64, len: usize) -> Result<Tensor, Fail> {
    if data.is_null() {
        return Err(null("input"));
    }
    let shape = net.spec().input_shape.clone();
    let expected: usize = shape.iter().product();
    if len != expected {
        return Err(Fail(
            CfStatus::Shape,
            format!("input has {len} values, network expects {expected} ({shape:?})"),
        ));
    }
    Ok(Tensor::new(shape, std::slice::from_raw_parts(data, len).to_vec())?)
}

fn class_selector(class_index: i64) -> ClassSelector {
    if class_index < 0 {
        ClassSelector::Predicted
    } else {
        ClassSelector::Index(class_index as usize)
    }
}

/// Message for the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model from a JSON manifest and CWGT weights file.
///
/// # Safety
/// `manifest_path` and `weights_path` must be NUL-terminated strings and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_network_load(
    manifest_path: *const c_char,
    weights_path: *const c_char,
    out: *mut *mut CfNetwork,
) -> CfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = path_arg(manifest_path, "manifest path")?;
        let w = path_arg(weights_path, "weights path")?;
        let net = load_model(m, w)?;
        *out = Box::into_raw(Box::new(CfNetwork { net }));
        Ok(())
    })
}

/// # Safety
/// `net` must come from [`cf_network_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cf_network_free(net: *mut CfNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Writes the `[C, H, W]` input shape.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_network_input_dims(
    net: *const CfNetwork,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> CfStatus {
    guard(|| {
        let net = network(net)?;
        if channels.is_null() || height.is_null() || width.is_null() {
            return Err(null("dimension output"));
        }
        let s = &net.spec().input_shape;
        (*channels, *height, *width) = (s[0], s[1], s[2]);
        Ok(())
    })
}

/// Number of classes and number of blocks.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_network_counts(
    net: *const CfNetwork,
    classes: *mut usize,
    blocks: *mut usize,
) -> CfStatus {
    guard(|| {
        let net = network(net)?;
        if classes.is_null() || blocks.is_null() {
            return Err(null("count output"));
        }
        *classes = net.spec().class_count;
        *blocks = net.spec().blocks().len();
        Ok(())
    })
}

/// Computes an input-aligned heatmap.
///
/// `input` holds `C*H*W` preprocessed values in row-major order.
/// A negative `class_index` explains the predicted class. With
/// `block_count == 0` the default layer set is used: every block for
/// Combi-CAM and Layer-CAM, the last block otherwise.
///
/// # Safety
/// `input` must point to `input_len` doubles, `blocks` to `block_count`
/// values (or be null when zero), and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_explain(
    net: *const CfNetwork,
    input: *const f64,
    input_len: usize,
    method: CfMethod,
    class_index: i64,
    blocks: *const usize,
    block_count: usize,
    per_layer_normalize: bool,
    out: *mut *mut CfHeatmap,
) -> CfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let net = network(net)?;
        let x = input_tensor(net, input, input_len)?;
        let mut req = CamRequest::new(method.into()).class(class_selector(class_index));
        if block_count > 0 {
            if blocks.is_null() {
                return Err(null("blocks"));
            }
            let ids = std::slice::from_raw_parts(blocks, block_count).to_vec();
            req = req.layers(LayerSelection::Blocks(ids));
        }
        req.per_layer_normalize = per_layer_normalize;
        let res = explain(net, &x, &req)?;
        *out = Box::into_raw(Box::new(CfHeatmap {
            values: res.heatmap.values,
            class_index: res.class_index,
        }));
        Ok(())
    })
}

/// # Safety
/// `map` must come from [`cf_explain`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cf_heatmap_free(map: *mut CfHeatmap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_heatmap_dims(
    map: *const CfHeatmap,
    height: *mut usize,
    width: *mut usize,
    class_index: *mut usize,
) -> CfStatus {
    guard(|| {
        let map = map.as_ref().ok_or_else(|| null("heatmap"))?;
        if height.is_null() || width.is_null() || class_index.is_null() {
            return Err(null("dimension output"));
        }
        let s = map.values.shape();
        (*height, *width, *class_index) = (s[0], s[1], map.class_index);
        Ok(())
    })
}

/// Row-major `H*W` values, valid until the heatmap is freed; null for a
/// null handle.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_heatmap_data(map: *const CfHeatmap) -> *const f64 {
    match map.as_ref() {
        Some(m) => m.values.data().as_ptr(),
        None => ptr::null(),
    }
}

/// Peak unnormalised Grad-CAM value per block, in block order.
///
/// Writes up to `capacity` values to `values` and the block count to
/// `written`; returns `BufferTooSmall` (with `written` set) when the buffer
/// is short.
///
/// # Safety
/// `input` must point to `input_len` doubles, `values` to `capacity`
/// doubles, and `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cf_activation_profile(
    net: *const CfNetwork,
    input: *const f64,
    input_len: usize,
    class_index: i64,
    values: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> CfStatus {
    guard(|| {
        let net = network(net)?;
        if written.is_null() {
            return Err(null("written"));
        }
        let x = input_tensor(net, input, input_len)?;
        let c = class_selector(class_index).resolve(net.spec(), || Ok(net.forward(&x)?.predicted))?;
        let (_, recs) = net.explain_pass(&x, c)?;
        let prof = activation_profile(&net.spec().blocks(), &recs)?;
        *written = prof.len();
        if capacity < prof.len() {
            return Err(Fail(
                CfStatus::BufferTooSmall,
                format!("profile has {} entries, buffer holds {capacity}", prof.len()),
            ));
        }
        if values.is_null() {
            return Err(null("values"));
        }
        for (i, (_, v)) in prof.iter().enumerate() {
            *values.add(i) = *v;
        }
        Ok(())
    })
}
