use std::ffi::{CStr, CString};
use std::ptr;

use nda_core::pipeline::{train_plda_bundle, PipelineConfig, Scorer};
use nda_core::{generate_corpus, SynthSpec, WarpSpec};
use nda_ffi::*;

fn bundle_json() -> (String, nda_core::EmbeddingSet) {
    let spec = SynthSpec {
        dim: 4,
        n_train_speakers: 40,
        n_eval_speakers: 5,
        utts_per_speaker: 4,
        prior_variances: vec![2.0, 1.0, 0.5, 0.2],
        warp: WarpSpec::ElementwiseSinhArcsinh { skew: 0.2, tail: 0.8 },
        seed: 3,
    };
    let c = generate_corpus(&spec).unwrap();
    let cfg = PipelineConfig {
        center: true,
        length_norm: true,
        ..PipelineConfig::default()
    };
    (train_plda_bundle(&c.train, &cfg).unwrap().to_json().unwrap(), c.eval)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(nda_last_error()) }.to_string_lossy().into_owned()
}

fn load(json: &str) -> *mut NdaScorer {
    let c = CString::new(json).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { nda_scorer_from_json(c.as_ptr(), &mut h) }, NdaStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn scores_match_the_rust_api() {
    let (json, eval) = bundle_json();
    let reference = Scorer::from_json(&json).unwrap();
    let h = load(&json);
    unsafe {
        assert_eq!(nda_scorer_input_dim(h), 4);
        assert_eq!(nda_scorer_latent_dim(h), 4);
        let enroll: Vec<f64> = [eval.vector(0), eval.vector(1)].concat();
        let test = eval.vector(5);
        let mut s = f64::NAN;
        assert_eq!(nda_scorer_score(h, enroll.as_ptr(), 2, test.as_ptr(), 4, &mut s), NdaStatus::Ok);
        let want = reference.score_trial(&[eval.vector(0), eval.vector(1)], test).unwrap();
        assert_eq!(s, want);
        assert_eq!(last_error(), "");

        let mut z = [0.0; 4];
        assert_eq!(nda_scorer_embed(h, test.as_ptr(), 4, z.as_mut_ptr(), 4), NdaStatus::Ok);
        assert_eq!(z.to_vec(), reference.embed(test).unwrap());
        nda_scorer_free(h);
    }
}

#[test]
fn load_from_path_and_errors() {
    let (json, _) = bundle_json();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(&path, &json).unwrap();
    let p = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(nda_scorer_load(p.as_ptr(), &mut h), NdaStatus::Ok);
        nda_scorer_free(h);

        let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
        assert_eq!(nda_scorer_load(missing.as_ptr(), &mut h), NdaStatus::Io);
        assert!(h.is_null());
        assert!(last_error().contains("nope.json"));

        let bad = CString::new("{\"format\": \"nda-bundle\"").unwrap();
        assert_eq!(nda_scorer_from_json(bad.as_ptr(), &mut h), NdaStatus::Format);
        assert!(!last_error().is_empty());

        assert_eq!(nda_scorer_load(ptr::null(), &mut h), NdaStatus::NullPointer);
        assert_eq!(nda_scorer_load(p.as_ptr(), ptr::null_mut()), NdaStatus::NullPointer);
    }
}

#[test]
fn argument_checks() {
    let (json, _) = bundle_json();
    let h = load(&json);
    let v = [0.1, 0.2, 0.3, 0.4];
    let mut s = 0.0;
    unsafe {
        assert_eq!(nda_scorer_score(h, v.as_ptr(), 1, v.as_ptr(), 3, &mut s), NdaStatus::DimensionMismatch);
        assert!(last_error().contains("expected 4"));
        assert_eq!(nda_scorer_score(h, v.as_ptr(), 0, v.as_ptr(), 4, &mut s), NdaStatus::InvalidArgument);
        assert_eq!(nda_scorer_score(ptr::null(), v.as_ptr(), 1, v.as_ptr(), 4, &mut s), NdaStatus::NullPointer);
        assert_eq!(nda_scorer_score(h, ptr::null(), 1, v.as_ptr(), 4, &mut s), NdaStatus::NullPointer);
        let mut z = [0.0; 3];
        assert_eq!(nda_scorer_embed(h, v.as_ptr(), 4, z.as_mut_ptr(), 3), NdaStatus::DimensionMismatch);
        let inf = [f64::INFINITY, 0.0, 0.0, 0.0];
        assert_eq!(nda_scorer_score(h, inf.as_ptr(), 1, v.as_ptr(), 4, &mut s), NdaStatus::Numerical);
        assert_eq!(nda_scorer_input_dim(ptr::null()), 0);
        nda_scorer_free(h);
        nda_scorer_free(ptr::null_mut());
    }
}

#[test]
fn metrics() {
    let scores = [1.0, 3.0, 2.0, 4.0];
    let labels = [1u8, 1, 0, 0];
    let mut out = 0.0;
    unsafe {
        assert_eq!(nda_eer(scores.as_ptr(), labels.as_ptr(), 4, &mut out), NdaStatus::Ok);
        assert_eq!(out, 0.5);
        assert_eq!(nda_min_dcf(scores.as_ptr(), labels.as_ptr(), 4, 0.01, &mut out), NdaStatus::Ok);
        assert_eq!(out, 1.0);
        let one_class = [1u8; 4];
        assert_eq!(nda_eer(scores.as_ptr(), one_class.as_ptr(), 4, &mut out), NdaStatus::InvalidArgument);
        assert_eq!(nda_min_dcf(scores.as_ptr(), labels.as_ptr(), 4, 1.5, &mut out), NdaStatus::InvalidArgument);
        assert_eq!(nda_eer(scores.as_ptr(), ptr::null(), 4, &mut out), NdaStatus::NullPointer);
    }
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(nda_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/nda.h")).unwrap();
    for f in ["nda_scorer_load", "nda_scorer_score", "nda_scorer_free", "nda_eer", "nda_min_dcf", "NDA_STATUS_OK"] {
        assert!(header.contains(f), "{f} missing from header");
    }
}
