//! C ABI over `openseg`.
//!
//! Objects are opaque handles created by `*_read`, `*_fit`, `*_load` or
//! `openseg_score` and released with the matching `*_free`. Every fallible
//! call returns an [`OpensegStatus`]; on failure the thread-local message
//! from [`openseg_last_error_message`] describes it. Panics never cross the
//! boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use openseg::eval::{calibrate_threshold, cohen_kappa, roc_auc, ConfusionMatrix};
use openseg::maps::Method;
use openseg::pipeline::{self, Fitted, PipelineError, SceneScores, ScorerConfig};
use openseg::synth::{generate_scene_indexed, SynthConfig};
use openseg::tensor_store::{read_scene, write_scene, Scene, StoreError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpensegStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or out-of-range argument.
    InvalidArgument = 1,
    Io = 2,
    /// Malformed file or tensor.
    Format = 3,
    /// Invalid configuration (method name, class id, ...).
    Config = 4,
    MissingArtifact = 5,
    /// Fitting or scoring failed numerically.
    Numeric = 6,
    /// Internal panic; the handle involved should not be reused.
    Panic = 7,
}

/// A loaded or generated scene.
pub struct OpensegScene(Scene);
/// Fitted scorer for one held-out class.
pub struct OpensegModel(Fitted);
/// Score map and prior prediction of one scene.
pub struct OpensegScores(SceneScores);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(OpensegStatus, String);

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Config(_) => OpensegStatus::Config,
            PipelineError::MissingArtifact(_) => OpensegStatus::MissingArtifact,
            PipelineError::Artifact { .. } => OpensegStatus::Format,
            PipelineError::Store { source, .. } => store_status(source),
            PipelineError::Eval { .. } => OpensegStatus::Config,
            _ => OpensegStatus::Numeric,
        };
        Failure(status, e.to_string())
    }
}

fn store_status(e: &StoreError) -> OpensegStatus {
    match e {
        StoreError::Io { .. } => OpensegStatus::Io,
        StoreError::ManifestMissing { .. } => OpensegStatus::MissingArtifact,
        _ => OpensegStatus::Format,
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(OpensegStatus::InvalidArgument, msg.into())
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OpensegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            OpensegStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OpensegStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn openseg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn openseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads the scene directory `path` (containing `scene.json`).
#[no_mangle]
pub unsafe extern "C" fn openseg_scene_read(path: *const c_char, out: *mut *mut OpensegScene) -> OpensegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let scene = read_scene(&path).map_err(|e| Failure(store_status(&e), e.to_string()))?;
        *out = boxed(OpensegScene(scene));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn openseg_scene_write(scene: *const OpensegScene, path: *const c_char) -> OpensegStatus {
    guard(|| {
        let scene = ref_arg(scene, "scene")?;
        let path = path_arg(path, "path")?;
        write_scene(&path, &scene.0).map_err(|e| Failure(store_status(&e), e.to_string()))
    })
}

/// Generates synthetic scene `index` of the world described by the
/// arguments (default layers, stripe layout, no label noise).
#[no_mangle]
pub unsafe extern "C" fn openseg_synth_scene(
    classes: usize,
    size: usize,
    separation: f64,
    seed: u64,
    index: u64,
    out: *mut *mut OpensegScene,
) -> OpensegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = SynthConfig {
            classes,
            height: size,
            width: size,
            separation,
            seed,
            ..SynthConfig::default()
        };
        let scene = generate_scene_indexed(&cfg, index).map_err(|e| Failure(OpensegStatus::Config, e.to_string()))?;
        *out = boxed(OpensegScene(scene));
        Ok(())
    })
}

/// Height, width and class count of a scene. Any output may be null.
#[no_mangle]
pub unsafe extern "C" fn openseg_scene_dims(
    scene: *const OpensegScene,
    height: *mut usize,
    width: *mut usize,
    classes: *mut usize,
) -> OpensegStatus {
    guard(|| {
        let s = &ref_arg(scene, "scene")?.0;
        for (slot, v) in [(height, s.height()), (width, s.width()), (classes, s.num_classes())] {
            if let Some(slot) = slot.as_mut() {
                *slot = v;
            }
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn openseg_scene_free(scene: *mut OpensegScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Fits `method` ("softmax", "openfcn", "openpcs", "openipcs") on `n`
/// scenes with class `uuc` held out (`uuc < 0`: all classes known). Other
/// hyperparameters take their defaults; `components` 0 keeps the default.
#[no_mangle]
pub unsafe extern "C" fn openseg_model_fit(
    scenes: *const *const OpensegScene,
    n: usize,
    method: *const c_char,
    uuc: i64,
    components: usize,
    seed: u64,
    out: *mut *mut OpensegModel,
) -> OpensegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let method: Method = str_arg(method, "method")?
            .parse()
            .map_err(|e: String| Failure(OpensegStatus::Config, e))?;
        let handles = slice_arg(scenes, n, "scenes")?;
        let owned = handles
            .iter()
            .map(|&h| ref_arg(h, "scene handle").map(|s| s.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut cfg = ScorerConfig {
            method,
            seed,
            ..ScorerConfig::default()
        };
        if components > 0 {
            cfg.components = components;
        }
        let uuc = usize::try_from(uuc).ok();
        let fitted = pipeline::fit(&owned, uuc, &cfg)?;
        *out = boxed(OpensegModel(fitted));
        Ok(())
    })
}

/// Saves a model into the existing directory `dir`.
#[no_mangle]
pub unsafe extern "C" fn openseg_model_save(model: *const OpensegModel, dir: *const c_char) -> OpensegStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let dir = path_arg(dir, "dir")?;
        Ok(pipeline::save_models(&dir, &m.0)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn openseg_model_load(dir: *const c_char, out: *mut *mut OpensegModel) -> OpensegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let dir = path_arg(dir, "dir")?;
        *out = boxed(OpensegModel(pipeline::load_models(&dir)?));
        Ok(())
    })
}

/// Number of known classes the model predicts.
#[no_mangle]
pub unsafe extern "C" fn openseg_model_num_known(model: *const OpensegModel, out: *mut usize) -> OpensegStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(out, "out")? = m.0.num_known();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn openseg_model_free(model: *mut OpensegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn openseg_score(
    model: *const OpensegModel,
    scene: *const OpensegScene,
    out: *mut *mut OpensegScores,
) -> OpensegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = ref_arg(model, "model")?;
        let s = ref_arg(scene, "scene")?;
        *out = boxed(OpensegScores(pipeline::score_scene(&s.0, &m.0)?));
        Ok(())
    })
}

/// Copies the knownness scores (`len` must equal height * width, raster
/// order) and prior class ids. Either output may be null.
#[no_mangle]
pub unsafe extern "C" fn openseg_scores_copy(
    scores: *const OpensegScores,
    out_scores: *mut f64,
    out_prior: *mut u32,
    len: usize,
) -> OpensegStatus {
    guard(|| {
        let s = &ref_arg(scores, "scores")?.0;
        if len != s.scores.data.len() {
            return Err(invalid(format!("len {len}, map has {} pixels", s.scores.data.len())));
        }
        if !out_scores.is_null() {
            std::slice::from_raw_parts_mut(out_scores, len).copy_from_slice(&s.scores.data);
        }
        if !out_prior.is_null() {
            std::slice::from_raw_parts_mut(out_prior, len).copy_from_slice(&s.prior.data);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn openseg_scores_dims(
    scores: *const OpensegScores,
    height: *mut usize,
    width: *mut usize,
) -> OpensegStatus {
    guard(|| {
        let s = &ref_arg(scores, "scores")?.0;
        *out_arg(height, "height")? = s.scores.height;
        *out_arg(width, "width")? = s.scores.width;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn openseg_scores_free(scores: *mut OpensegScores) {
    if !scores.is_null() {
        drop(Box::from_raw(scores));
    }
}

fn mask(unknown: &[u8]) -> Vec<bool> {
    unknown.iter().map(|&u| u != 0).collect()
}

/// ROC AUC of detecting `unknown[i] != 0` by low `scores[i]`.
#[no_mangle]
pub unsafe extern "C" fn openseg_auc(scores: *const f64, unknown: *const u8, n: usize, out: *mut f64) -> OpensegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let s = slice_arg(scores, n, "scores")?;
        let u = mask(slice_arg(unknown, n, "unknown")?);
        *out = roc_auc(s, &u).map_err(|e| invalid(e.to_string()))?.auc;
        Ok(())
    })
}

/// Threshold reaching at least `tpr` of the unknown pixels under the flag
/// rule `score <= threshold`.
#[no_mangle]
pub unsafe extern "C" fn openseg_calibrate(
    scores: *const f64,
    unknown: *const u8,
    n: usize,
    tpr: f64,
    out_threshold: *mut f64,
) -> OpensegStatus {
    guard(|| {
        let out = out_arg(out_threshold, "out_threshold")?;
        let s = slice_arg(scores, n, "scores")?;
        let u = mask(slice_arg(unknown, n, "unknown")?);
        *out = calibrate_threshold(s, &u, tpr)
            .map_err(|e| invalid(e.to_string()))?
            .threshold;
        Ok(())
    })
}

/// Cohen's kappa of a `k x k` row-major confusion matrix (rows = truth).
#[no_mangle]
pub unsafe extern "C" fn openseg_kappa(counts: *const u64, k: usize, out: *mut f64) -> OpensegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let len = k.checked_mul(k).ok_or_else(|| invalid("k too large"))?;
        let c = slice_arg(counts, len, "counts")?;
        let cm = ConfusionMatrix::from_rows(c.chunks(k.max(1)).map(<[u64]>::to_vec).collect());
        *out = cohen_kappa(&cm).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}
