//! C ABI for `keylane`.
//!
//! Objects cross the boundary as opaque handles (`KlScene`, `KlTargets`)
//! that the caller releases with the matching `*_free` function. Every
//! fallible call returns a `KlStatus`; on failure `kl_last_error` gives a
//! message for the calling thread. Strings returned by the library are
//! released with `kl_string_free`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use libc::c_char;

use keylane::decoder::{decode, to_scene, AssociationMode, DecoderConfig};
use keylane::domain::{GridSpec, Scene};
use keylane::encoder::{encode, EncoderConfig, Targets};
use keylane::metrics::{culane_f1, tusimple_accuracy, CulaneConfig, EvalReport, TusimpleConfig};
use keylane::synth::{generate, SceneSpec};
use keylane::tensor::{read_decoder_inputs, write_targets};
use keylane::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Numeric = 4,
    Io = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlMetric {
    Culane = 0,
    Tusimple = 1,
}

/// A lane scene in image coordinates.
pub struct KlScene(Scene);

/// Encoded supervision maps for one scene.
pub struct KlTargets {
    targets: Targets,
    sigma: f64,
    points_per_lane: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct KlEncoderConfig {
    pub stride: u32,
    /// Gaussian spread in map cells.
    pub sigma: f64,
    pub points_per_lane: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct KlDecoderConfig {
    pub keypoint_threshold: f64,
    /// Vote-to-start distance bound, in map cells.
    pub theta_dis: f64,
    pub nms_width: u32,
    pub start_norm_limit: f64,
    /// Nonzero selects parallel association.
    pub parallel: u8,
}

/// Evaluation counts and rates. `accuracy` is NaN for the CULane metric.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct KlEvalReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(KlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::NonFinite(_) => KlStatus::Numeric,
            Error::Io(_) => KlStatus::Io,
            _ => KlStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KlStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside keylane".into());
            KlStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(KlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller passes a live pointer from this library or null.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller passes writable storage or null.
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null, and the caller guarantees NUL termination.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(KlStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn into_handle<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free_handle<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `into_handle` and is released once.
        drop(unsafe { Box::from_raw(p) });
    }
}

fn encoder_config(cfg: Option<&KlEncoderConfig>) -> EncoderConfig {
    cfg.map_or_else(EncoderConfig::default, |c| EncoderConfig {
        sigma: c.sigma,
        points_per_lane: c.points_per_lane as usize,
        stride: c.stride as usize,
    })
}

fn decoder_config(cfg: Option<&KlDecoderConfig>) -> (DecoderConfig, AssociationMode) {
    match cfg {
        None => (DecoderConfig::default(), AssociationMode::Parallel),
        Some(c) => (
            DecoderConfig {
                keypoint_threshold: c.keypoint_threshold,
                theta_dis: c.theta_dis,
                nms_width: c.nms_width as usize,
                start_norm_limit: c.start_norm_limit,
            },
            if c.parallel != 0 {
                AssociationMode::Parallel
            } else {
                AssociationMode::Sequential
            },
        ),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next keylane call on the same thread.
#[no_mangle]
pub extern "C" fn kl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn kl_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: guaranteed by the caller.
        drop(unsafe { CString::from_raw(s) });
    }
}

#[no_mangle]
pub extern "C" fn kl_encoder_config_default() -> KlEncoderConfig {
    let c = EncoderConfig::default();
    KlEncoderConfig {
        stride: c.stride as u32,
        sigma: c.sigma,
        points_per_lane: c.points_per_lane as u32,
    }
}

#[no_mangle]
pub extern "C" fn kl_decoder_config_default() -> KlDecoderConfig {
    let c = DecoderConfig::default();
    KlDecoderConfig {
        keypoint_threshold: c.keypoint_threshold,
        theta_dis: c.theta_dis,
        nms_width: c.nms_width as u32,
        start_norm_limit: c.start_norm_limit,
        parallel: 1,
    }
}

/// Parses Lane JSON.
///
/// # Safety
/// `json` must be NULL or NUL-terminated; `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn kl_scene_from_json(json: *const c_char, out: *mut *mut KlScene) -> KlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let text = unsafe { read_str(json, "json") }?;
        *out = into_handle(KlScene(Scene::from_json(text)?));
        Ok(())
    })
}

/// Serializes a scene as Lane JSON. Free the result with `kl_string_free`.
///
/// # Safety
/// `scene` must be NULL or a live handle; `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn kl_scene_to_json(scene: *const KlScene, out: *mut *mut c_char) -> KlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let scene = unsafe { borrow(scene, "scene") }?;
        let c = CString::new(scene.0.to_json()).map_err(|e| Failure(KlStatus::InvalidInput, e.to_string()))?;
        *out = c.into_raw();
        Ok(())
    })
}

/// # Safety
/// `scene` must be NULL or a live handle; `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn kl_scene_lane_count(scene: *const KlScene, out: *mut usize) -> KlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        *out = unsafe { borrow(scene, "scene") }?.0.lanes.len();
        Ok(())
    })
}

/// # Safety
/// `scene` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kl_scene_free(scene: *mut KlScene) {
    unsafe { free_handle(scene) }
}

/// Seeded synthetic scene with `num_lanes` lanes on an 800x320 image.
///
/// # Safety
/// `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn kl_synth(num_lanes: u32, seed: u64, out: *mut *mut KlScene) -> KlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        *out = into_handle(KlScene(generate(&SceneSpec::standard(num_lanes as usize, seed))?));
        Ok(())
    })
}

/// Encodes a scene. `cfg` may be NULL for the defaults.
///
/// # Safety
/// Pointers must be NULL or valid for their types.
#[no_mangle]
pub unsafe extern "C" fn kl_encode(
    scene: *const KlScene,
    cfg: *const KlEncoderConfig,
    out: *mut *mut KlTargets,
) -> KlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let scene = &unsafe { borrow(scene, "scene") }?.0;
        let cfg = encoder_config(unsafe { cfg.as_ref() });
        let spec = GridSpec::new(scene.width, scene.height, cfg.stride)?;
        let targets = encode(&scene.lanes, &spec, &cfg)?;
        *out = into_handle(KlTargets {
            targets,
            sigma: cfg.sigma,
            points_per_lane: cfg.points_per_lane,
        });
        Ok(())
    })
}

/// Writes the five tensor files into `dir`, creating it if needed.
///
/// # Safety
/// `targets` must be NULL or a live handle; `dir` NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn kl_targets_write(targets: *const KlTargets, dir: *const c_char) -> KlStatus {
    guard(|| {
        let t = unsafe { borrow(targets, "targets") }?;
        let dir = PathBuf::from(unsafe { read_str(dir, "dir") }?);
        write_targets(&dir, &t.targets, t.sigma, t.points_per_lane)?;
        Ok(())
    })
}

/// # Safety
/// `targets` must be NULL or a live handle; `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn kl_targets_mask_count(targets: *const KlTargets, out: *mut usize) -> KlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        *out = unsafe { borrow(targets, "targets") }?.targets.masked_cells();
        Ok(())
    })
}

/// Output grid size in cells.
///
/// # Safety
/// `targets` must be NULL or a live handle; outputs NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn kl_targets_shape(
    targets: *const KlTargets,
    height: *mut usize,
    width: *mut usize,
) -> KlStatus {
    guard(|| {
        let t = unsafe { borrow(targets, "targets") }?;
        let (h, w) = (unsafe { out_ptr(height, "height") }?, unsafe {
            out_ptr(width, "width")
        }?);
        *h = t.targets.spec.height_out;
        *w = t.targets.spec.width_out;
        Ok(())
    })
}

/// Borrowed row-major confidence map of `height * width` values. The
/// pointer lives as long as the handle.
///
/// # Safety
/// `targets` must be NULL or a live handle; outputs NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn kl_targets_confidence(
    targets: *const KlTargets,
    data: *mut *const f64,
    len: *mut usize,
) -> KlStatus {
    guard(|| {
        let t = unsafe { borrow(targets, "targets") }?;
        let (d, n) = (unsafe { out_ptr(data, "data") }?, unsafe { out_ptr(len, "len") }?);
        let values = t.targets.confidence.data();
        *d = values.as_ptr();
        *n = values.len();
        Ok(())
    })
}

/// # Safety
/// `targets` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kl_targets_free(targets: *mut KlTargets) {
    unsafe { free_handle(targets) }
}

/// Decodes encoded targets back into lanes. `cfg` may be NULL.
///
/// # Safety
/// Pointers must be NULL or valid for their types.
#[no_mangle]
pub unsafe extern "C" fn kl_decode_targets(
    targets: *const KlTargets,
    cfg: *const KlDecoderConfig,
    out: *mut *mut KlScene,
) -> KlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let t = &unsafe { borrow(targets, "targets") }?.targets;
        let (cfg, mode) = decoder_config(unsafe { cfg.as_ref() });
        let d = decode(&t.confidence, &t.quant, &t.offsets, &cfg, mode)?;
        *out = into_handle(KlScene(to_scene(&d, &t.spec)));
        Ok(())
    })
}

/// Decodes the confidence, quant and offset tensor files in `dir`.
///
/// # Safety
/// Pointers must be NULL or valid for their types.
#[no_mangle]
pub unsafe extern "C" fn kl_decode_dir(
    dir: *const c_char,
    cfg: *const KlDecoderConfig,
    out: *mut *mut KlScene,
) -> KlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let dir = PathBuf::from(unsafe { read_str(dir, "dir") }?);
        let (cfg, mode) = decoder_config(unsafe { cfg.as_ref() });
        let (conf, quant, offsets) = read_decoder_inputs(&dir)?;
        let d = decode(&conf, &quant, &offsets, &cfg, mode)?;
        *out = into_handle(KlScene(to_scene(&d, conf.spec())));
        Ok(())
    })
}

fn report(r: EvalReport) -> KlEvalReport {
    KlEvalReport {
        tp: r.tp,
        fp: r.fp,
        fn_: r.fn_,
        precision: r.precision,
        recall: r.recall,
        f1: r.f1,
        accuracy: r.accuracy.unwrap_or(f64::NAN),
    }
}

/// Scores `pred` against `gt` with the default settings of `metric`, a
/// `KlMetric` value.
///
/// # Safety
/// Pointers must be NULL or valid for their types.
#[no_mangle]
pub unsafe extern "C" fn kl_eval(
    pred: *const KlScene,
    gt: *const KlScene,
    metric: u32,
    out: *mut KlEvalReport,
) -> KlStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let pred = &unsafe { borrow(pred, "pred") }?.0;
        let gt = &unsafe { borrow(gt, "gt") }?.0;
        let r = match metric {
            m if m == KlMetric::Culane as u32 => culane_f1(pred, gt, &CulaneConfig::default())?,
            m if m == KlMetric::Tusimple as u32 => {
                tusimple_accuracy(pred, gt, &TusimpleConfig::for_height(gt.height, 10))?
            }
            m => return Err(Failure(KlStatus::InvalidInput, format!("unknown metric {m}"))),
        };
        *out = report(r);
        Ok(())
    })
}
