//! C ABI over the inpainting pipeline.
//!
//! Frames are `f * h * w * 3` interleaved RGB floats in `[0, 1]`, masks are
//! `f * h * w` bytes (non-zero marks a hole). Every call returns a
//! [`DeStatus`]; the message of the last failure on the calling thread is
//! available from [`de_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use diffueraser::cli::load_inference_model;
use diffueraser::pipeline::{inpaint_video, InferenceConfig, InferenceModel};
use diffueraser::scheduler::InversionOptions;
use diffueraser::video::{crop_to_original, MaskSequence, VideoFrames};
use diffueraser::{planner, Error};
use ndarray::Array4;

/// Status codes returned by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    CheckpointNotFound = 4,
    Checkpoint = 5,
    Runtime = 6,
    Panic = 7,
}

/// Opaque loaded model.
pub struct DeModel {
    inner: InferenceModel,
}

/// Inference settings; obtain defaults from [`de_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DeInferenceConfig {
    pub clip_len: u32,
    pub steps: u32,
    pub seed: u64,
    pub prior_strength: f64,
    pub blur_sigma: f64,
    pub guidance_enabled: bool,
    pub bypass_diffusion: bool,
    pub refine_iters: u32,
    pub tol: f64,
    pub history: u32,
}

impl From<&DeInferenceConfig> for InferenceConfig {
    fn from(c: &DeInferenceConfig) -> Self {
        InferenceConfig {
            clip_len: c.clip_len as usize,
            steps: c.steps as usize,
            seed: c.seed,
            prior_strength: c.prior_strength,
            blur_sigma: c.blur_sigma,
            guidance_enabled: c.guidance_enabled,
            bypass_diffusion: c.bypass_diffusion,
            inversion: InversionOptions {
                refine_iters: c.refine_iters as usize,
                tol: c.tol,
                history: c.history as usize,
            },
            ..InferenceConfig::default()
        }
    }
}

impl From<&InferenceConfig> for DeInferenceConfig {
    fn from(c: &InferenceConfig) -> Self {
        DeInferenceConfig {
            clip_len: c.clip_len as u32,
            steps: c.steps as u32,
            seed: c.seed,
            prior_strength: c.prior_strength,
            blur_sigma: c.blur_sigma,
            guidance_enabled: c.guidance_enabled,
            bypass_diffusion: c.bypass_diffusion,
            refine_iters: c.inversion.refine_iters as u32,
            tol: c.inversion.tol,
            history: c.inversion.history as u32,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DeStatus {
    match e {
        Error::Stage { source, .. } => status_of(source),
        Error::Config(_) => DeStatus::Config,
        Error::CheckpointNotFound(_) => DeStatus::CheckpointNotFound,
        Error::Checkpoint(_) => DeStatus::Checkpoint,
        Error::InvalidArgument(_) | Error::Shape(_) | Error::MaskCountMismatch { .. } => DeStatus::InvalidArgument,
        _ => DeStatus::Runtime,
    }
}

/// Runs `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (DeStatus, String)>) -> DeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DeStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DeStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (DeStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DeStatus, String) {
    (DeStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn de_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn de_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes the default inference settings to `out`.
///
/// # Safety
/// `out` must be null or point to writable memory for one config.
#[no_mangle]
pub unsafe extern "C" fn de_config_default(out: *mut DeInferenceConfig) -> DeStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = DeInferenceConfig::from(&InferenceConfig::default());
        Ok(())
    })
}

/// Loads a checkpoint. On success `*out` owns a model to release with [`de_model_free`].
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn de_model_load(path: *const c_char, out: *mut *mut DeModel) -> DeStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (DeStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
        let inner = load_inference_model(path.as_ref()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DeModel { inner }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a pointer from [`de_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn de_model_free(model: *mut DeModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Inpaints `n_frames` frames of `height x width` into `out` (same layout as `frames`).
/// `model` may be null when `config->bypass_diffusion` is set.
///
/// # Safety
/// `frames` and `out` must hold `n_frames * height * width * 3` floats and
/// `masks` `n_frames * height * width` bytes; `config` must be valid.
#[no_mangle]
pub unsafe extern "C" fn de_inpaint(
    model: *const DeModel,
    config: *const DeInferenceConfig,
    frames: *const f32,
    masks: *const u8,
    n_frames: usize,
    height: usize,
    width: usize,
    out: *mut f32,
) -> DeStatus {
    guard(|| {
        let config = unsafe { config.as_ref() }.ok_or_else(|| null("config"))?;
        if frames.is_null() {
            return Err(null("frames"));
        }
        if masks.is_null() {
            return Err(null("masks"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if n_frames == 0 || height == 0 || width == 0 {
            return Err((DeStatus::InvalidArgument, "n_frames, height and width must be >= 1".into()));
        }
        let n = n_frames
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| (DeStatus::InvalidArgument, "size overflow".to_string()))?;
        let px = unsafe { std::slice::from_raw_parts(frames, n * 3) };
        let mk = unsafe { std::slice::from_raw_parts(masks, n) };
        let data = Array4::from_shape_fn((n_frames, 3, height, width), |(i, c, y, x)| {
            px[((i * height + y) * width + x) * 3 + c] as f64
        });
        let mdata = Array4::from_shape_fn((n_frames, 1, height, width), |(i, _, y, x)| {
            (mk[(i * height + y) * width + x] != 0) as u8 as f64
        });
        let video = VideoFrames::from_unpadded(data).map_err(lib_err)?;
        let mask_seq = MaskSequence::from_unpadded_gray(mdata).map_err(lib_err)?;
        let cfg = InferenceConfig::from(config);
        let fallback;
        let m = match unsafe { model.as_ref() } {
            Some(m) => &m.inner,
            None if cfg.bypass_diffusion => {
                fallback = InferenceModel::prior_only().map_err(lib_err)?;
                &fallback
            }
            None => return Err(null("model")),
        };
        let result = inpaint_video(&video, &mask_seq, m, &cfg).map_err(lib_err)?;
        let cropped = crop_to_original(&result.frames);
        let dst = unsafe { std::slice::from_raw_parts_mut(out, n * 3) };
        for ((i, c, y, x), v) in cropped.indexed_iter() {
            dst[((i * height + y) * width + x) * 3 + c] = *v as f32;
        }
        Ok(())
    })
}

/// Serializes the temporal plan as JSON into `*out`; release it with [`de_string_free`].
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn de_plan_json(
    n_frames: usize,
    clip_len: usize,
    steps: usize,
    guidance_enabled: bool,
    out: *mut *mut c_char,
) -> DeStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        if n_frames == 0 || clip_len == 0 || steps == 0 {
            return Err((DeStatus::Config, "n_frames, clip_len and steps must be >= 1".into()));
        }
        let json = planner::build_plan(n_frames, clip_len, steps, guidance_enabled)
            .and_then(|p| p.to_json())
            .map_err(lib_err)?;
        *out = CString::new(json).map_err(|e| (DeStatus::Runtime, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn de_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
