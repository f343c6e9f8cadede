use std::ffi::{CStr, CString};
use std::ptr;

use keylane_ffi::*;

fn last_error() -> String {
    let p = kl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn scene(json: &str) -> *mut KlScene {
    let json = CString::new(json).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { kl_scene_from_json(json.as_ptr(), &mut s) }, KlStatus::Ok);
    s
}

const TWO_LANES: &str =
    r#"{"width": 800, "height": 320, "lanes": [[[200.0, 310.0], [260.0, 120.0]], [[600.0, 300.0], [540.0, 110.0]]]}"#;

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(kl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn scene_json_round_trip() {
    let s = scene(TWO_LANES);
    let mut n = 0;
    assert_eq!(unsafe { kl_scene_lane_count(s, &mut n) }, KlStatus::Ok);
    assert_eq!(n, 2);
    let mut text = ptr::null_mut();
    assert_eq!(unsafe { kl_scene_to_json(s, &mut text) }, KlStatus::Ok);
    let back = unsafe { CStr::from_ptr(text) }.to_str().unwrap().to_owned();
    unsafe { kl_string_free(text) };
    let s2 = scene(&back);
    let mut report = KlEvalReport::default();
    assert_eq!(
        unsafe { kl_eval(s2, s, KlMetric::Tusimple as u32, &mut report) },
        KlStatus::Ok
    );
    assert_eq!(report.accuracy, 1.0);
    unsafe {
        kl_scene_free(s);
        kl_scene_free(s2);
    }
}

#[test]
fn encode_decode_through_handles() {
    let s = scene(TWO_LANES);
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { kl_encode(s, ptr::null(), &mut t) }, KlStatus::Ok);
    let mut count = 0;
    assert_eq!(unsafe { kl_targets_mask_count(t, &mut count) }, KlStatus::Ok);
    assert_eq!(count, 20);
    let (mut h, mut w) = (0, 0);
    assert_eq!(unsafe { kl_targets_shape(t, &mut h, &mut w) }, KlStatus::Ok);
    assert_eq!((h, w), (40, 100));
    let (mut data, mut len) = (ptr::null(), 0);
    assert_eq!(unsafe { kl_targets_confidence(t, &mut data, &mut len) }, KlStatus::Ok);
    let conf = unsafe { std::slice::from_raw_parts(data, len) };
    assert_eq!(len, 4000);
    assert_eq!(conf.iter().cloned().fold(0.0, f64::max), 1.0);

    let cfg = KlDecoderConfig {
        parallel: 0,
        ..kl_decoder_config_default()
    };
    let mut decoded = ptr::null_mut();
    assert_eq!(unsafe { kl_decode_targets(t, &cfg, &mut decoded) }, KlStatus::Ok);
    let mut report = KlEvalReport::default();
    assert_eq!(
        unsafe { kl_eval(decoded, s, KlMetric::Culane as u32, &mut report) },
        KlStatus::Ok
    );
    assert_eq!((report.tp, report.fp, report.fn_), (2, 0, 0));
    assert!(report.accuracy.is_nan());

    // Same lanes through the tensor files, up to f32 storage.
    let dir = tempfile::TempDir::new().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { kl_targets_write(t, path.as_ptr()) }, KlStatus::Ok);
    let mut from_dir = ptr::null_mut();
    assert_eq!(
        unsafe { kl_decode_dir(path.as_ptr(), ptr::null(), &mut from_dir) },
        KlStatus::Ok
    );
    let mut n = 0;
    unsafe { kl_scene_lane_count(from_dir, &mut n) };
    assert_eq!(n, 2);
    let mut same = KlEvalReport::default();
    assert_eq!(
        unsafe { kl_eval(from_dir, decoded, KlMetric::Tusimple as u32, &mut same) },
        KlStatus::Ok
    );
    assert_eq!((same.tp, same.accuracy), (2, 1.0));
    unsafe {
        kl_scene_free(from_dir);
        kl_scene_free(decoded);
        kl_targets_free(t);
        kl_scene_free(s);
    }
}

#[test]
fn synth_scene_has_requested_lanes() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { kl_synth(4, 11, &mut s) }, KlStatus::Ok);
    let mut n = 0;
    unsafe { kl_scene_lane_count(s, &mut n) };
    assert_eq!(n, 4);
    unsafe { kl_scene_free(s) };
}

#[test]
fn errors_set_status_and_message() {
    let mut s = ptr::null_mut();
    let bad = CString::new("{not json").unwrap();
    assert_eq!(
        unsafe { kl_scene_from_json(bad.as_ptr(), &mut s) },
        KlStatus::InvalidInput
    );
    assert!(s.is_null());
    assert!(last_error().contains("json"));

    assert_eq!(
        unsafe { kl_scene_from_json(ptr::null(), &mut s) },
        KlStatus::NullPointer
    );
    assert!(last_error().contains("null"));

    let bytes = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { kl_scene_from_json(bytes.as_ptr().cast(), &mut s) },
        KlStatus::InvalidUtf8
    );

    let mut n = 0;
    assert_eq!(
        unsafe { kl_scene_lane_count(ptr::null(), &mut n) },
        KlStatus::NullPointer
    );

    let missing = CString::new("/nonexistent/keylane").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { kl_decode_dir(missing.as_ptr(), ptr::null(), &mut out) },
        KlStatus::Io
    );

    let good = scene(TWO_LANES);
    let mut report = KlEvalReport::default();
    assert_eq!(unsafe { kl_eval(good, good, 7, &mut report) }, KlStatus::InvalidInput);
    let cfg = KlEncoderConfig {
        stride: 7,
        ..kl_encoder_config_default()
    };
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { kl_encode(good, &cfg, &mut t) }, KlStatus::InvalidInput);
    assert!(t.is_null());

    // A successful call clears the message.
    assert_eq!(unsafe { kl_scene_lane_count(good, &mut n) }, KlStatus::Ok);
    assert!(kl_last_error().is_null());
    unsafe { kl_scene_free(good) };

    // Freeing NULL is a no-op.
    unsafe {
        kl_scene_free(ptr::null_mut());
        kl_targets_free(ptr::null_mut());
        kl_string_free(ptr::null_mut());
    }
}

#[test]
fn defaults_mirror_library() {
    let d = kl_decoder_config_default();
    assert_eq!((d.keypoint_threshold, d.theta_dis, d.nms_width), (0.4, 4.0, 3));
    let e = kl_encoder_config_default();
    assert_eq!((e.stride, e.points_per_lane), (8, 10));
}
