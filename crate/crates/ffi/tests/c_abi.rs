use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use hiergat_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(hg_last_error()) }.to_string_lossy().into_owned()
}

fn cell() -> *mut HgHierarchy {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { hg_hierarchy_cell_populations(&mut h) }, HgStatus::Ok);
    h
}

#[test]
fn parse_and_lookup() {
    let text = CString::new("A\tB\nA\tC\n").unwrap();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(hg_hierarchy_parse(text.as_ptr(), &mut h), HgStatus::Ok);
        assert_eq!(hg_hierarchy_len(h), 3);
        let mut id = 99;
        let name = CString::new("C").unwrap();
        assert_eq!(hg_hierarchy_class_id(h, name.as_ptr(), &mut id), HgStatus::Ok);
        assert_eq!(id, 2);
        let missing = CString::new("D").unwrap();
        assert_eq!(hg_hierarchy_class_id(h, missing.as_ptr(), &mut id), HgStatus::Parse);
        assert!(last_error().contains('D'));
        hg_hierarchy_free(h);
    }
}

#[test]
fn cycle_is_a_parse_error() {
    let text = CString::new("A\tB\nB\tA\n").unwrap();
    let mut h = ptr::null_mut();
    let status = unsafe { hg_hierarchy_parse(text.as_ptr(), &mut h) };
    assert_eq!(status, HgStatus::Parse);
    assert!(h.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn null_pointers_are_reported() {
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(hg_hierarchy_parse(ptr::null(), &mut out), HgStatus::NullPointer);
        assert_eq!(hg_mcm(ptr::null(), ptr::null(), 1, ptr::null_mut()), HgStatus::NullPointer);
        assert_eq!(hg_hierarchy_len(ptr::null()), 0);
        hg_hierarchy_free(ptr::null_mut());
        hg_model_free(ptr::null_mut());
    }
    assert!(last_error().contains("null"));
    hg_clear_error();
    assert_eq!(last_error(), "");
}

#[test]
fn mcm_lifts_parent_to_child_score() {
    let h = cell();
    // T, B, Mono, Mast, HSPC, Myeloid, Lymphoid
    let raw = [0.1, 0.2, 0.3, 0.4, 0.2, 0.9, 0.5];
    let mut out = [0.0; 7];
    unsafe {
        assert_eq!(hg_mcm(h, raw.as_ptr(), 1, out.as_mut_ptr()), HgStatus::Ok);
        assert_eq!(out, [0.1, 0.2, 0.3, 0.4, 0.9, 0.9, 0.5]);
        let mut count = 7;
        assert_eq!(hg_check_coherence(h, out.as_ptr(), 1, &mut count), HgStatus::Ok);
        assert_eq!(count, 0);
        assert_eq!(hg_check_coherence(h, raw.as_ptr(), 1, &mut count), HgStatus::Ok);
        assert_eq!(count, 2);
        hg_hierarchy_free(h);
    }
}

#[test]
fn mcloss_single_positive_leaf() {
    let h = cell();
    let mut raw = [0.0; 7];
    raw[0] = 0.8;
    let mut y = [0.0; 7];
    y[0] = 1.0;
    let mut loss = 0.0;
    unsafe {
        assert_eq!(hg_mcloss(h, raw.as_ptr(), y.as_ptr(), ptr::null(), &mut loss), HgStatus::Ok);
        // the zero raw scores clamp to 1 - 1e-12 in ln(1 - MCM): six terms of ~1e-12
        assert!((loss - 0.2231435513142097).abs() < 1e-10);
        let bad = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert_eq!(
            hg_mcloss(h, raw.as_ptr(), bad.as_ptr(), ptr::null(), &mut loss),
            HgStatus::InvalidArgument
        );
        hg_hierarchy_free(h);
    }
}

#[test]
fn knn_on_a_line() {
    let x = [0.0, 1.0, 10.0, 11.0];
    let mut out = [0u32; 4];
    let mut k = 0;
    unsafe {
        assert_eq!(hg_knn_build(x.as_ptr(), 4, 1, 1, out.as_mut_ptr(), &mut k), HgStatus::Ok);
    }
    assert_eq!(k, 1);
    assert_eq!(out, [1, 0, 3, 2]);
    let nan = [0.0, f64::NAN];
    let status = unsafe { hg_knn_build(nan.as_ptr(), 2, 1, 1, out.as_mut_ptr(), &mut k) };
    assert_eq!(status, HgStatus::InvalidArgument);
}

fn train_tiny(dir: &Path) {
    let data = dir.join("d.csv");
    let run = dir.join("run");
    let code = hiergat::cli::run([
        "hiergat",
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--n",
        "120",
        "--groups",
        "7",
        "--seed",
        "3",
    ]);
    assert_eq!(code, 0);
    let code = hiergat::cli::run([
        "hiergat",
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "3",
        "--heads",
        "2",
        "--hidden",
        "4",
    ]);
    assert_eq!(code, 0);
}

#[test]
fn model_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    train_tiny(tmp.path());
    let dir = CString::new(tmp.path().join("run").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(hg_model_load(dir.as_ptr(), &mut model), HgStatus::Ok);
        let m = hg_model_num_features(model);
        let c = hg_model_num_classes(model);
        assert_eq!((m, c), (12, 7));
        let n = 10;
        let x: Vec<f64> = (0..n * m).map(|i| (i % 7) as f64 * 0.3).collect();
        let mut scores = vec![0.0; n * c];
        assert_eq!(hg_model_scores(model, x.as_ptr(), n, scores.as_mut_ptr()), HgStatus::Ok);
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        let h = cell();
        let mut count = 1;
        assert_eq!(hg_check_coherence(h, scores.as_ptr(), n, &mut count), HgStatus::Ok);
        assert_eq!(count, 0);
        let mut classes = vec![usize::MAX; n];
        assert_eq!(hg_model_predict(model, x.as_ptr(), n, classes.as_mut_ptr()), HgStatus::Ok);
        assert!(classes.iter().all(|&k| k < c));
        hg_hierarchy_free(h);
        hg_model_free(model);
    }
    let missing = CString::new(tmp.path().join("nope").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { hg_model_load(missing.as_ptr(), &mut model) }, HgStatus::Io);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(hg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/hiergat.h")).unwrap();
    for f in [
        "hg_last_error",
        "hg_hierarchy_parse",
        "hg_hierarchy_free",
        "hg_mcm",
        "hg_mcloss",
        "hg_check_coherence",
        "hg_knn_build",
        "hg_model_load",
        "hg_model_predict",
        "HG_STATUS_NULL_POINTER",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
    assert!(header.contains("typedef struct HgModel HgModel"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/hiergat.h");
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
