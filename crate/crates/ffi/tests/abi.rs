use std::ffi::{CStr, CString};
use std::ptr;

use normline_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(nl_last_error()) }.to_string_lossy().into_owned()
}

fn synthetic(samples: usize) -> *mut NlDataset {
    let mut ds = ptr::null_mut();
    let status = unsafe { nl_dataset_synthetic(samples, 3, 2, 20, 1.2, 7, &mut ds) };
    assert_eq!(status, NlStatus::Ok, "{}", last_error());
    ds
}

fn lens(ds: *const NlDataset) -> [usize; 3] {
    [NlSplit::Train, NlSplit::Valid, NlSplit::Test].map(|s| {
        let mut n = 0;
        assert_eq!(unsafe { nl_dataset_len(ds, s, &mut n) }, NlStatus::Ok);
        n
    })
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(nl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn synthetic_dataset_splits() {
    let ds = synthetic(1000);
    assert_eq!(lens(ds), [800, 100, 100]);
    unsafe { nl_dataset_free(ds) };
}

#[test]
fn null_handles_are_rejected() {
    let mut n = 0;
    assert_eq!(unsafe { nl_dataset_len(ptr::null(), NlSplit::Train, &mut n) }, NlStatus::NullPointer);
    assert!(!last_error().is_empty());
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { nl_model_load(ptr::null(), &mut out) }, NlStatus::NullPointer);
    unsafe {
        nl_model_free(ptr::null_mut());
        nl_dataset_free(ptr::null_mut());
    }
}

#[test]
fn bad_model_config_is_a_config_error() {
    let ds = synthetic(200);
    let text = CString::new("mlp_norm = \"bogus\"").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { nl_model_build(ds, text.as_ptr(), 0, &mut m) }, NlStatus::Config);
    assert!(last_error().contains("mlp_norm"), "{}", last_error());
    assert!(m.is_null());
    unsafe { nl_dataset_free(ds) };
}

#[test]
fn train_predict_save_load() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthetic(2000);
    let model_toml = CString::new("kind = \"deepfm\"\nembedding_dim = 4\nhidden = [16, 8]\nmlp_norm = \"voln\"").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { nl_model_build(ds, model_toml.as_ptr(), 3, &mut model) }, NlStatus::Ok, "{}", last_error());

    let train_toml = CString::new("batch_size = 100\nlearning_rate = 0.001\nmax_epochs = 2").unwrap();
    let mut best = f64::NAN;
    assert_eq!(unsafe { nl_model_train(model, ds, train_toml.as_ptr(), &mut best) }, NlStatus::Ok, "{}", last_error());
    assert!(best > 0.0 && best <= 1.0);

    let n = lens(ds)[2];
    let mut small = vec![0.0; 1];
    let mut written = 0;
    let status = unsafe { nl_model_predict(model, ds, NlSplit::Test, small.as_mut_ptr(), small.len(), &mut written) };
    assert_eq!(status, NlStatus::BufferTooSmall);
    assert_eq!(written, n);

    let mut probs = vec![0.0; n];
    assert_eq!(unsafe { nl_model_predict(model, ds, NlSplit::Test, probs.as_mut_ptr(), n, &mut written) }, NlStatus::Ok);
    assert!(probs.iter().all(|p| *p > 0.0 && *p < 1.0));

    let path = CString::new(dir.path().join("m.nrmd").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nl_model_save(model, path.as_ptr()) }, NlStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { nl_model_load(path.as_ptr(), &mut loaded) }, NlStatus::Ok);
    let mut again = vec![0.0; n];
    assert_eq!(unsafe { nl_model_predict(loaded, ds, NlSplit::Test, again.as_mut_ptr(), n, &mut written) }, NlStatus::Ok);
    assert_eq!(probs, again);

    let dsdir = CString::new(dir.path().join("data").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nl_dataset_save(ds, dsdir.as_ptr()) }, NlStatus::Ok);
    let mut reloaded = ptr::null_mut();
    assert_eq!(unsafe { nl_dataset_load(dsdir.as_ptr(), &mut reloaded) }, NlStatus::Ok);
    assert_eq!(lens(reloaded), lens(ds));

    unsafe {
        nl_model_free(model);
        nl_model_free(loaded);
        nl_dataset_free(ds);
        nl_dataset_free(reloaded);
    }
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.nrmd");
    std::fs::write(&p, b"not a model").unwrap();
    let path = CString::new(p.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { nl_model_load(path.as_ptr(), &mut m) }, NlStatus::Checkpoint);
}

#[test]
fn norm_dnn_builds() {
    let ds = synthetic(200);
    let hidden = [8usize, 8];
    let mut m = ptr::null_mut();
    let status = unsafe { nl_model_build_norm_dnn(ds, 4, hidden.as_ptr(), hidden.len(), false, 1, &mut m) };
    assert_eq!(status, NlStatus::Ok, "{}", last_error());
    unsafe {
        nl_model_free(m);
        nl_dataset_free(ds);
    }
}

#[test]
fn auc_matches_hand_count() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [0.0, 0.0, 1.0, 1.0];
    let mut out = 0.0;
    assert_eq!(unsafe { nl_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut out) }, NlStatus::Ok);
    assert!((out - 0.75).abs() < 1e-15);
    let one = [1.0; 4];
    assert_eq!(unsafe { nl_auc(scores.as_ptr(), one.as_ptr(), 4, &mut out) }, NlStatus::Train);
}

#[test]
fn vo_ln_rows_have_unit_second_moment() {
    let x = [1.0, 2.0, 3.0, -4.0, 0.5, 0.25];
    let mut y = [0.0; 6];
    assert_eq!(unsafe { nl_vo_ln_forward(x.as_ptr(), 2, 3, 1e-8, y.as_mut_ptr()) }, NlStatus::Ok);
    for row in x.chunks(3).zip(y.chunks(3)) {
        let (xr, yr) = row;
        let mean = xr.iter().sum::<f64>() / 3.0;
        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        for (a, b) in xr.iter().zip(yr) {
            assert!((b - a / (var + 1e-8).sqrt()).abs() < 1e-12);
        }
    }
    let mut d = [0.0; 3];
    assert_eq!(unsafe { nl_vo_ln_diag_derivative(x.as_ptr(), 3, 1e-8, d.as_mut_ptr()) }, NlStatus::Ok);
    assert!(d.iter().all(|v| v.is_finite()));
    assert_eq!(unsafe { nl_vo_ln_diag_derivative(x.as_ptr(), 0, 1e-8, d.as_mut_ptr()) }, NlStatus::InvalidArgument);
}
