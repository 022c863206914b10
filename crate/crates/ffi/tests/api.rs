use std::ffi::{CStr, CString};
use std::ptr;

use efpn_core::EfpnConfig;
use efpn_ffi::*;

fn last_error() -> String {
    let p = efpn_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn small_json() -> CString {
    CString::new(serde_json::to_string(&EfpnConfig::small(2, 8, 8, 16, 3)).unwrap()).unwrap()
}

fn build_small(seed: u64) -> *mut EfpnModelHandle {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { efpn_model_build_json(small_json().as_ptr(), seed, &mut h) }, EfpnStatus::Ok);
    assert!(!h.is_null());
    h
}

fn predict(h: *const EfpnModelHandle, rgb: &[u8], side: usize) -> Vec<u8> {
    let mut mask = vec![0u8; side * side];
    let s = unsafe { efpn_model_predict(h, rgb.as_ptr(), side, side, mask.as_mut_ptr(), mask.len()) };
    assert_eq!(s, EfpnStatus::Ok);
    mask
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(efpn_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn default_model_reports_counts() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { efpn_model_build_default(0, &mut h) }, EfpnStatus::Ok);
    let cfg = EfpnConfig::default();
    let (mut params, mut flops, mut k) = (0u64, 0u64, 0usize);
    unsafe {
        assert_eq!(efpn_model_param_count(h, &mut params), EfpnStatus::Ok);
        assert_eq!(efpn_model_flop_count(h, 256, &mut flops), EfpnStatus::Ok);
        assert_eq!(efpn_model_num_classes(h, &mut k), EfpnStatus::Ok);
        assert_eq!(efpn_model_flop_count(h, 100, &mut flops), EfpnStatus::Config);
        efpn_model_free(h);
    }
    assert_eq!(params, cfg.param_count());
    assert_eq!(k, cfg.num_classes);
    assert!(last_error().contains("input_size"));
}

#[test]
fn predictions_match_core_and_survive_save_load() {
    let h = build_small(3);
    let side = 16;
    let rgb: Vec<u8> = (0..side * side * 3).map(|i| (i * 37 % 251) as u8).collect();
    let mask = predict(h, &rgb, side);
    assert!(mask.iter().all(|&c| c < 3));

    let core = efpn_core::EfpnModel::build(EfpnConfig::small(2, 8, 8, 16, 3), 3).unwrap();
    let img = image::RgbImage::from_raw(side as u32, side as u32, rgb.clone()).unwrap();
    let expected = core.predict(&efpn_core::data::image_to_tensor(&img)).unwrap();
    assert_eq!(mask, expected[0].data());

    let dir = tempfile::TempDir::new().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let mut loaded = ptr::null_mut();
    unsafe {
        assert_eq!(efpn_model_save(h, path.as_ptr()), EfpnStatus::Ok);
        assert_eq!(efpn_model_load(path.as_ptr(), &mut loaded), EfpnStatus::Ok);
    }
    assert_eq!(predict(loaded, &rgb, side), mask);
    unsafe {
        efpn_model_free(h);
        efpn_model_free(loaded);
    }
}

#[test]
fn null_and_invalid_arguments_are_reported() {
    let h = build_small(0);
    let mut out = 0u64;
    let mut mask = [0u8; 4];
    let rgb = [0u8; 12];
    unsafe {
        assert_eq!(efpn_model_param_count(ptr::null(), &mut out), EfpnStatus::NullPointer);
        assert!(last_error().contains("null"));
        assert_eq!(efpn_model_param_count(h, ptr::null_mut()), EfpnStatus::NullPointer);
        assert_eq!(efpn_model_build_default(0, ptr::null_mut()), EfpnStatus::NullPointer);
        assert_eq!(efpn_model_predict(h, rgb.as_ptr(), 0, 2, mask.as_mut_ptr(), 4), EfpnStatus::InvalidArgument);
        assert_eq!(efpn_model_predict(h, rgb.as_ptr(), 2, 2, mask.as_mut_ptr(), 3), EfpnStatus::InvalidArgument);
        assert!(last_error().contains("mask buffer"));
        // the smallest valid input leaves a single pixel at the coarse level
        assert_eq!(efpn_model_predict(h, rgb.as_ptr(), 2, 2, mask.as_mut_ptr(), 4), EfpnStatus::Ok);
        let odd = [0u8; 27];
        let mut odd_mask = [0u8; 9];
        assert_eq!(efpn_model_predict(h, odd.as_ptr(), 3, 3, odd_mask.as_mut_ptr(), 9), EfpnStatus::Data);
        assert!(last_error().contains("multiples of 2"));
        assert_eq!(efpn_model_param_count(h, &mut out), EfpnStatus::Ok);
        assert!(efpn_last_error_message().is_null());
        efpn_model_free(h);
        efpn_model_free(ptr::null_mut());
    }
}

#[test]
fn bad_configs_and_files_map_to_status_codes() {
    let mut h = ptr::null_mut();
    let garbage = CString::new("{not json").unwrap();
    let invalid = CString::new(r#"{"num_classes": 1}"#).unwrap();
    let mut cfg = EfpnConfig::small(2, 8, 8, 16, 3);
    cfg.input_size = 15;
    let odd = CString::new(serde_json::to_string(&cfg).unwrap()).unwrap();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    unsafe {
        assert_eq!(efpn_model_build_json(garbage.as_ptr(), 0, &mut h), EfpnStatus::Config);
        assert_eq!(efpn_model_build_json(invalid.as_ptr(), 0, &mut h), EfpnStatus::Config);
        assert_eq!(efpn_model_build_json(odd.as_ptr(), 0, &mut h), EfpnStatus::Config);
        assert!(last_error().contains("input_size"));
        assert_eq!(efpn_model_build_json(ptr::null(), 0, &mut h), EfpnStatus::NullPointer);
        assert_eq!(efpn_model_load(missing.as_ptr(), &mut h), EfpnStatus::Data);
        assert!(last_error().contains("/nonexistent/model.ckpt"));
        let bad_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(efpn_model_load(bad_utf8.as_ptr().cast(), &mut h), EfpnStatus::InvalidArgument);
    }
    assert!(h.is_null());
}
