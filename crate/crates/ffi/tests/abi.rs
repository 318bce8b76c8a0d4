use std::ffi::{CStr, CString};
use std::ptr;

use openseg_ffi::*;

fn last_error() -> String {
    let p = openseg_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn synth(index: u64) -> *mut OpensegScene {
    let mut s = ptr::null_mut();
    let st = unsafe { openseg_synth_scene(4, 32, 8.0, 3, index, &mut s) };
    assert_eq!(st, OpensegStatus::Ok);
    s
}

#[test]
fn fit_score_and_auc_round_trip() {
    let train = synth(0);
    let test = synth(1);
    let (mut h, mut w, mut c) = (0, 0, 0);
    assert_eq!(unsafe { openseg_scene_dims(test, &mut h, &mut w, &mut c) }, OpensegStatus::Ok);
    assert_eq!((h, w, c), (32, 32, 4));

    let method = CString::new("openpcs").unwrap();
    let handles = [train as *const OpensegScene];
    let mut model = ptr::null_mut();
    let st = unsafe { openseg_model_fit(handles.as_ptr(), 1, method.as_ptr(), 2, 4, 7, &mut model) };
    assert_eq!(st, OpensegStatus::Ok, "{}", last_error());
    let mut known = 0;
    assert_eq!(unsafe { openseg_model_num_known(model, &mut known) }, OpensegStatus::Ok);
    assert_eq!(known, 3);

    let mut scores = ptr::null_mut();
    assert_eq!(unsafe { openseg_score(model, test, &mut scores) }, OpensegStatus::Ok);
    let mut values = vec![0.0; h * w];
    let mut prior = vec![0u32; h * w];
    let st = unsafe { openseg_scores_copy(scores, values.as_mut_ptr(), prior.as_mut_ptr(), h * w) };
    assert_eq!(st, OpensegStatus::Ok);
    assert!(prior.iter().all(|&p| p < 3));

    // Stripe layout: class 2 occupies columns 16..24.
    let unknown: Vec<u8> = (0..h * w).map(|i| u8::from((16..24).contains(&(i % w)))).collect();
    let mut auc = 0.0;
    let st = unsafe { openseg_auc(values.as_ptr(), unknown.as_ptr(), h * w, &mut auc) };
    assert_eq!(st, OpensegStatus::Ok);
    assert!(auc > 0.95, "auc {auc}");

    let mut t = 0.0;
    let st = unsafe { openseg_calibrate(values.as_ptr(), unknown.as_ptr(), h * w, 0.5, &mut t) };
    assert_eq!(st, OpensegStatus::Ok);
    let flagged = values
        .iter()
        .zip(&unknown)
        .filter(|(&s, &u)| u == 1 && s <= t)
        .count();
    assert!(flagged * 2 >= unknown.iter().filter(|&&u| u == 1).count());

    unsafe {
        openseg_scores_free(scores);
        openseg_model_free(model);
        openseg_scene_free(train);
        openseg_scene_free(test);
    }
}

#[test]
fn model_save_load_preserves_scores() {
    let scene = synth(0);
    let method = CString::new("openfcn").unwrap();
    let handles = [scene as *const OpensegScene];
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { openseg_model_fit(handles.as_ptr(), 1, method.as_ptr(), 0, 0, 1, &mut model) },
        OpensegStatus::Ok,
        "{}",
        last_error()
    );
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { openseg_model_save(model, path.as_ptr()) }, OpensegStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { openseg_model_load(path.as_ptr(), &mut loaded) }, OpensegStatus::Ok);

    let n = 32 * 32;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for (m, out) in [(model, &mut a), (loaded, &mut b)] {
        let mut s = ptr::null_mut();
        assert_eq!(unsafe { openseg_score(m, scene, &mut s) }, OpensegStatus::Ok);
        assert_eq!(unsafe { openseg_scores_copy(s, out.as_mut_ptr(), ptr::null_mut(), n) }, OpensegStatus::Ok);
        unsafe { openseg_scores_free(s) };
    }
    assert_eq!(a, b);
    unsafe {
        openseg_model_free(model);
        openseg_model_free(loaded);
        openseg_scene_free(scene);
    }
}

#[test]
fn kappa_matches_hand_value() {
    let counts = [20u64, 5, 10, 15];
    let mut k = 0.0;
    assert_eq!(unsafe { openseg_kappa(counts.as_ptr(), 2, &mut k) }, OpensegStatus::Ok);
    assert!((k - 0.4).abs() < 1e-12);
    assert_eq!(unsafe { openseg_kappa(counts.as_ptr(), 0, &mut k) }, OpensegStatus::InvalidArgument);
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { openseg_scene_read(ptr::null(), &mut s) }, OpensegStatus::InvalidArgument);
    assert!(last_error().contains("path"));

    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { openseg_scene_read(missing.as_ptr(), &mut s) }, OpensegStatus::MissingArtifact);
    assert!(s.is_null());

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { openseg_model_load(missing.as_ptr(), &mut m) }, OpensegStatus::MissingArtifact);

    let scene = synth(0);
    let handles = [scene as *const OpensegScene];
    let bogus = CString::new("openmagic").unwrap();
    let st = unsafe { openseg_model_fit(handles.as_ptr(), 1, bogus.as_ptr(), -1, 0, 0, &mut m) };
    assert_eq!(st, OpensegStatus::Config);
    assert!(last_error().contains("openmagic"));

    let pcs = CString::new("openpcs").unwrap();
    let st = unsafe { openseg_model_fit(handles.as_ptr(), 1, pcs.as_ptr(), 9, 0, 0, &mut m) };
    assert_eq!(st, OpensegStatus::Config);

    let mut auc = 0.0;
    let scores = [0.1, 0.2];
    let unknown = [1u8, 1];
    assert_eq!(
        unsafe { openseg_auc(scores.as_ptr(), unknown.as_ptr(), 2, &mut auc) },
        OpensegStatus::InvalidArgument
    );
    assert_eq!(unsafe { openseg_synth_scene(1, 8, 1.0, 0, 0, &mut s) }, OpensegStatus::Config);
    unsafe { openseg_scene_free(scene) };
    // Null frees are no-ops.
    unsafe {
        openseg_scene_free(ptr::null_mut());
        openseg_model_free(ptr::null_mut());
        openseg_scores_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_abi() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/openseg.h")).unwrap();
    for name in [
        "openseg_last_error_message",
        "openseg_scene_read",
        "openseg_model_fit",
        "openseg_score",
        "openseg_scores_copy",
        "openseg_auc",
        "openseg_kappa",
        "OPENSEG_STATUS_MISSING_ARTIFACT = 5",
        "typedef struct OpensegModel OpensegModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let v = unsafe { CStr::from_ptr(openseg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
