use std::ffi::{CStr, CString};
use std::ptr;

use glab_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(glab_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn toy(seed: u64) -> *mut GlabModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { glab_model_new_toy(seed, &mut m) }, GlabStatus::Ok);
    assert!(!m.is_null());
    m
}

fn dims(m: *const GlabModel) -> (usize, usize) {
    let (mut v, mut l) = (0, 0);
    assert_eq!(unsafe { glab_model_dims(m, &mut v, &mut l) }, GlabStatus::Ok);
    (v, l)
}

fn logits(m: *const GlabModel, tokens: &[usize]) -> Vec<f64> {
    let (v, _) = dims(m);
    let mut out = vec![0.0; tokens.len() * v];
    let s = unsafe { glab_model_forward(m, tokens.as_ptr(), tokens.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, GlabStatus::Ok, "{}", last_error());
    out
}

#[test]
fn forward_matches_library() {
    let m = toy(7);
    let tokens = [1, 5, 9, 2];
    let got = logits(m, &tokens);
    let lib = glab::model::Model::init(&glab::model::ModelConfig::toy(), 7).unwrap();
    assert_eq!(got, lib.forward(&tokens).unwrap().logits.data);
    unsafe { glab_model_free(m) };
}

#[test]
fn identity_adapters_leave_logits_unchanged() {
    let m = toy(3);
    let tokens = [0, 4, 8, 12, 16];
    let before = logits(m, &tokens);
    let layers = [1usize, 2];
    let s = unsafe { glab_model_attach(m, layers.as_ptr(), 2, layers.as_ptr(), 2, 11) };
    assert_eq!(s, GlabStatus::Ok, "{}", last_error());
    let after = logits(m, &tokens);
    for (a, b) in before.iter().zip(&after) {
        assert!((a - b).abs() < 1e-12);
    }
    unsafe { glab_model_free(m) };
}

#[test]
fn errors_are_reported() {
    let m = toy(0);
    let (v, _) = dims(m);
    let tokens = [1usize, 2];
    let mut small = vec![0.0; v];
    let s = unsafe { glab_model_forward(m, tokens.as_ptr(), 2, small.as_mut_ptr(), small.len()) };
    assert_eq!(s, GlabStatus::BufferTooSmall);
    assert!(last_error().contains("need"));

    let bad = [v];
    let mut out = vec![0.0; v];
    let s = unsafe { glab_model_forward(m, bad.as_ptr(), 1, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, GlabStatus::InvalidArgument);
    assert!(!last_error().is_empty());

    assert_eq!(
        unsafe { glab_model_dims(ptr::null(), &mut 0, &mut 0) },
        GlabStatus::NullPointer
    );
    assert_eq!(
        unsafe { glab_model_new_toy(0, ptr::null_mut()) },
        GlabStatus::NullPointer
    );

    let missing = CString::new("/definitely/not/here").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { glab_model_load(missing.as_ptr(), &mut h) }, GlabStatus::Io);
    assert!(h.is_null());

    // Success clears the message.
    dims(m);
    assert!(last_error().is_empty());
    unsafe {
        glab_model_free(m);
        glab_model_free(ptr::null_mut());
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let m = toy(5);
    let layers = [0usize];
    assert_eq!(
        unsafe { glab_model_attach(m, layers.as_ptr(), 1, ptr::null(), 0, 1) },
        GlabStatus::Ok
    );
    assert_eq!(
        unsafe { glab_model_save(m, path.as_ptr()) },
        GlabStatus::Ok,
        "{}",
        last_error()
    );
    let mut n = ptr::null_mut();
    assert_eq!(
        unsafe { glab_model_load(path.as_ptr(), &mut n) },
        GlabStatus::Ok,
        "{}",
        last_error()
    );
    let tokens = [3usize, 1, 4, 1, 5];
    assert_eq!(logits(m, &tokens), logits(n, &tokens));
    unsafe {
        glab_model_free(m);
        glab_model_free(n);
    }
}

#[test]
fn statistics() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [5.0, 6.0, 7.0, 8.0, 7.5];
    let (mut r, mut p) = (0.0, 0.0);
    assert_eq!(
        unsafe { glab_spearman(x.as_ptr(), y.as_ptr(), 5, &mut r, &mut p) },
        GlabStatus::Ok
    );
    assert!((r - 0.9).abs() < 1e-12);
    assert!(p > 0.0 && p < 1.0);

    let flat = [1.0; 5];
    assert_eq!(
        unsafe { glab_spearman(x.as_ptr(), flat.as_ptr(), 5, &mut r, &mut p) },
        GlabStatus::Numeric
    );

    let mut overlap = 0;
    assert_eq!(
        unsafe { glab_fixture_stats(&mut r, &mut p, &mut overlap) },
        GlabStatus::Ok,
        "{}",
        last_error()
    );
    assert!(r < -0.7 && r > -0.8);
    assert_eq!(overlap, 1);

    let (mut direct, mut published) = (0, 0);
    assert_eq!(
        unsafe { glab_lora_param_counts(&mut direct, &mut published) },
        GlabStatus::Ok
    );
    assert_eq!(direct, 52_428_800);
    assert_eq!(published, 42_598_400);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/glab.h")).unwrap();
    for f in [
        "glab_last_error",
        "glab_model_new_toy",
        "glab_model_load",
        "glab_model_save",
        "glab_model_free",
        "glab_model_dims",
        "glab_model_attach",
        "glab_model_forward",
        "glab_spearman",
        "glab_fixture_stats",
        "glab_lora_param_counts",
        "typedef struct GlabModel GlabModel",
        "GLAB_STATUS_OK = 0",
    ] {
        assert!(header.contains(f), "missing {f}");
    }
}
