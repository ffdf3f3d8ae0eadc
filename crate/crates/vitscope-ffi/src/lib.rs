//! C ABI for the vitscope library.
//!
//! Handles are opaque pointers created and destroyed by paired
//! `vs_*`/`vs_*_free` calls; every fallible function returns a
//! [`VsStatus`] and leaves a human-readable message retrievable with
//! [`vs_last_error`] on failure. Bulk data moves through caller-allocated
//! buffers sized via the query functions. The header is generated by
//! cbindgen into `include/vitscope.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

use vitscope::archive::{load_archive, NamedTensorMap};
use vitscope::dynamics::verify_contraction;
use vitscope::error::Error;
use vitscope::image::{load_image, save_png};
use vitscope::model::{
    forward_trace, preprocess, validate_weights, ForwardTrace, GeluKindConfig, ModelConfig,
};
use vitscope::tensor::Tensor;
use vitscope::vis::{coeff_field, render, TileBasis};

/// Status codes mirroring the library's error categories (and the CLI's
/// exit codes for the shared ones).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BadInput = 3,
    Internal = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', "?");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> VsStatus {
    match err.exit_code() {
        2 => VsStatus::InvalidArgument,
        3 => VsStatus::BadInput,
        _ => VsStatus::Internal,
    }
}

fn fail(err: Error) -> VsStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vs_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn path_from(ptr: *const c_char) -> Result<PathBuf, VsStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(VsStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(VsStatus::InvalidArgument)
        }
    }
}

// ---------------------------------------------------------------------
// configuration handle
// ---------------------------------------------------------------------

pub struct VsConfig {
    inner: ModelConfig,
}

/// Fresh configuration with the ViT-B/16 defaults (224 input, 16 patches,
/// 768 dims, 12 layers, 12 heads).
#[no_mangle]
pub extern "C" fn vs_config_new() -> *mut VsConfig {
    Box::into_raw(Box::new(VsConfig {
        inner: ModelConfig::default(),
    }))
}

/// # Safety
/// `config` must be a pointer returned by [`vs_config_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn vs_config_free(config: *mut VsConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Override the model geometry; normalization constants reset to 0.5.
///
/// # Safety
/// `config` must be a live [`vs_config_new`] pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_config_set_geometry(
    config: *mut VsConfig,
    image_side: usize,
    patch_side: usize,
    channels: usize,
    embed_dim: usize,
    layers: usize,
    heads: usize,
    mlp_dim: usize,
) -> VsStatus {
    let Some(config) = config.as_mut() else {
        set_error("null config");
        return VsStatus::NullPointer;
    };
    let candidate = ModelConfig {
        image_side,
        patch_side,
        channels,
        embed_dim,
        layers,
        heads,
        mlp_dim,
        norm_mean: vec![0.5; channels],
        norm_std: vec![0.5; channels],
        ..config.inner.clone()
    };
    match candidate.validate() {
        Ok(()) => {
            config.inner = candidate;
            VsStatus::Ok
        }
        Err(err) => fail(err),
    }
}

/// Select the erf GELU instead of the tanh approximation.
///
/// # Safety
/// `config` must be a live [`vs_config_new`] pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_config_set_gelu_exact(config: *mut VsConfig, exact: bool) -> VsStatus {
    let Some(config) = config.as_mut() else {
        set_error("null config");
        return VsStatus::NullPointer;
    };
    config.inner.gelu = if exact {
        GeluKindConfig::Exact
    } else {
        GeluKindConfig::Tanh
    };
    VsStatus::Ok
}

// ---------------------------------------------------------------------
// weights handle
// ---------------------------------------------------------------------

pub struct VsWeights {
    inner: NamedTensorMap,
}

/// Load a weight archive and validate it against the configuration.
/// On success `*out` owns the weights.
///
/// # Safety
/// `path` is a NUL-terminated string, `config` a live config handle, and
/// `out` a valid location for one pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_weights_load(
    path: *const c_char,
    config: *const VsConfig,
    out: *mut *mut VsWeights,
) -> VsStatus {
    let Some(config) = config.as_ref() else {
        set_error("null config");
        return VsStatus::NullPointer;
    };
    if out.is_null() {
        set_error("null output pointer");
        return VsStatus::NullPointer;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match load_archive(&path).and_then(|weights| {
        validate_weights(&weights, &config.inner)?;
        Ok(weights)
    }) {
        Ok(weights) => {
            *out = Box::into_raw(Box::new(VsWeights { inner: weights }));
            VsStatus::Ok
        }
        Err(err) => fail(err),
    }
}

/// # Safety
/// `weights` must come from [`vs_weights_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn vs_weights_free(weights: *mut VsWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

// ---------------------------------------------------------------------
// trace handle
// ---------------------------------------------------------------------

pub struct VsTrace {
    trace: ForwardTrace,
    image: Tensor,
}

/// Run the forward pass on an image file (PNG or binary PPM), capturing
/// all block outputs and head-averaged attention matrices.
///
/// # Safety
/// All pointers must be live handles / NUL-terminated strings; `out`
/// receives an owned pointer on success.
#[no_mangle]
pub unsafe extern "C" fn vs_trace_image(
    weights: *const VsWeights,
    config: *const VsConfig,
    image_path: *const c_char,
    out: *mut *mut VsTrace,
) -> VsStatus {
    let (Some(weights), Some(config)) = (weights.as_ref(), config.as_ref()) else {
        set_error("null weights or config");
        return VsStatus::NullPointer;
    };
    if out.is_null() {
        set_error("null output pointer");
        return VsStatus::NullPointer;
    }
    let path = match path_from(image_path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    let run = || -> vitscope::Result<VsTrace> {
        let raw = load_image(&path)?;
        let image = preprocess(&raw, &config.inner)?;
        let trace = forward_trace(&image, &weights.inner, &config.inner)?;
        Ok(VsTrace { trace, image })
    };
    match run() {
        Ok(trace) => {
            *out = Box::into_raw(Box::new(trace));
            VsStatus::Ok
        }
        Err(err) => fail(err),
    }
}

/// # Safety
/// `trace` must come from [`vs_trace_image`], freed once.
#[no_mangle]
pub unsafe extern "C" fn vs_trace_free(trace: *mut VsTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Number of attention layers in the trace.
///
/// # Safety
/// `trace` must be a live trace handle (null yields 0).
#[no_mangle]
pub unsafe extern "C" fn vs_trace_layers(trace: *const VsTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.trace.layers())
}

/// Token count (patches + class token).
///
/// # Safety
/// `trace` must be a live trace handle (null yields 0).
#[no_mangle]
pub unsafe extern "C" fn vs_trace_tokens(trace: *const VsTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.trace.tokens())
}

/// Embedding dimension.
///
/// # Safety
/// `trace` must be a live trace handle (null yields 0).
#[no_mangle]
pub unsafe extern "C" fn vs_trace_dim(trace: *const VsTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.trace.dim())
}

unsafe fn copy_tensor(tensor: &Tensor, out: *mut f32, len: usize) -> VsStatus {
    if out.is_null() {
        set_error("null output buffer");
        return VsStatus::NullPointer;
    }
    if len != tensor.len() {
        set_error(&format!(
            "buffer holds {len} floats, tensor needs {}",
            tensor.len()
        ));
        return VsStatus::InvalidArgument;
    }
    std::ptr::copy_nonoverlapping(tensor.data().as_ptr(), out, len);
    VsStatus::Ok
}

/// Copy one layer's embedding matrix (layer 0 = the patch embeddings,
/// layer `l` = block-l output) into `out`, row-major `tokens * dim`
/// floats.
///
/// # Safety
/// `trace` live handle; `out` points at `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn vs_trace_embeddings(
    trace: *const VsTrace,
    layer: usize,
    out: *mut f32,
    len: usize,
) -> VsStatus {
    let Some(trace) = trace.as_ref() else {
        set_error("null trace");
        return VsStatus::NullPointer;
    };
    let Some(z) = trace.trace.z.get(layer) else {
        set_error(&format!(
            "layer {layer} out of range 0..={}",
            trace.trace.z.len() - 1
        ));
        return VsStatus::InvalidArgument;
    };
    copy_tensor(z, out, len)
}

/// Copy one layer's head-averaged attention (`tokens * tokens` floats,
/// row = query token).
///
/// # Safety
/// `trace` live handle; `out` points at `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn vs_trace_attention(
    trace: *const VsTrace,
    layer: usize,
    out: *mut f32,
    len: usize,
) -> VsStatus {
    let Some(trace) = trace.as_ref() else {
        set_error("null trace");
        return VsStatus::NullPointer;
    };
    let Some(attn) = trace.trace.attn.get(layer) else {
        set_error(&format!(
            "layer {layer} out of range 0..{}",
            trace.trace.attn.len()
        ));
        return VsStatus::InvalidArgument;
    };
    copy_tensor(attn, out, len)
}

/// Classifier logit count; 0 when the archive carries no head.
///
/// # Safety
/// `trace` must be a live trace handle (null yields 0).
#[no_mangle]
pub unsafe extern "C" fn vs_trace_logit_count(trace: *const VsTrace) -> usize {
    trace
        .as_ref()
        .and_then(|t| t.trace.logits.as_ref())
        .map_or(0, |l| l.len())
}

/// Copy the classifier logits.
///
/// # Safety
/// `trace` live handle; `out` points at `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn vs_trace_logits(
    trace: *const VsTrace,
    out: *mut f32,
    len: usize,
) -> VsStatus {
    let Some(trace) = trace.as_ref() else {
        set_error("null trace");
        return VsStatus::NullPointer;
    };
    let Some(logits) = trace.trace.logits.as_ref() else {
        set_error("trace has no classifier head");
        return VsStatus::InvalidArgument;
    };
    copy_tensor(logits, out, len)
}

/// Render the visualization of (layer, token, filter) from a trace to a
/// PNG file. `layer` must be >= 1 (deep visualization); token 0 is the
/// class token; `filter` is 1-based.
///
/// # Safety
/// All handles live; `out_png` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn vs_render_visualization(
    weights: *const VsWeights,
    trace: *const VsTrace,
    layer: usize,
    token: usize,
    filter: usize,
    out_png: *const c_char,
) -> VsStatus {
    let (Some(weights), Some(trace)) = (weights.as_ref(), trace.as_ref()) else {
        set_error("null weights or trace");
        return VsStatus::NullPointer;
    };
    let path = match path_from(out_png) {
        Ok(p) => p,
        Err(status) => return status,
    };
    let run = || -> vitscope::Result<()> {
        let basis = TileBasis::new(&trace.image, &weights.inner, filter)?;
        let field = coeff_field(&trace.trace, layer)?;
        let vis = render(&field, &basis, token)?;
        save_png(&vis.display, &path)
    };
    match run() {
        Ok(()) => VsStatus::Ok,
        Err(err) => fail(err),
    }
}

// ---------------------------------------------------------------------
// dynamics quick-check
// ---------------------------------------------------------------------

/// Randomized diameter-contraction check of the simplified attention
/// dynamics. Writes the violation count and the largest observed
/// `d_after / d_before` ratio.
///
/// # Safety
/// `out_violations` and `out_max_ratio` must each point at one writable
/// value (either may be null to skip it).
#[no_mangle]
pub unsafe extern "C" fn vs_verify_contraction(
    trials: usize,
    max_tokens: usize,
    max_dim: usize,
    seed: u64,
    out_violations: *mut u64,
    out_max_ratio: *mut f64,
) -> VsStatus {
    if trials == 0 || max_tokens < 2 || max_dim == 0 {
        set_error("need trials >= 1, max_tokens >= 2, max_dim >= 1");
        return VsStatus::InvalidArgument;
    }
    let report = verify_contraction(trials, max_tokens, max_dim, seed);
    if !out_violations.is_null() {
        *out_violations = report.violations.len() as u64;
    }
    if !out_max_ratio.is_null() {
        *out_max_ratio = report.max_ratio;
    }
    VsStatus::Ok
}
