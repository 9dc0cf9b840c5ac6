use std::ffi::{CStr, CString};
use std::ptr;

use ltprompt_ffi::*;

const SMALL_SYNTH: &str = r#"{"num_classes": 6, "num_samples": 120, "dim": 8, "seed": 3}"#;
const SMALL_RUN: &str = r#"{
    "synth": {"num_classes": 6, "num_samples": 120, "dim": 8, "seed": 3},
    "train": {"epochs": 2, "seed": 3},
    "prompt": {"context_len": 4}
}"#;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = lt_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn generate(json: Option<&str>) -> *mut LtDataset {
    let cfg = json.map(cstr);
    let mut ds = ptr::null_mut();
    let st = unsafe { lt_dataset_generate(cfg.as_ref().map_or(ptr::null(), |c| c.as_ptr()), &mut ds) };
    assert_eq!(st, LtStatus::Ok);
    ds
}

#[test]
fn dataset_roundtrip_through_file() {
    let ds = generate(Some(SMALL_SYNTH));
    unsafe {
        assert_eq!(lt_dataset_num_samples(ds), 120);
        assert_eq!(lt_dataset_num_classes(ds), 6);
        assert_eq!(lt_dataset_dim(ds), 8);

        let mut counts = [0usize; 6];
        assert_eq!(lt_dataset_class_counts(ds, counts.as_mut_ptr(), counts.len()), LtStatus::Ok);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));

        let mut short = [0usize; 5];
        assert_eq!(lt_dataset_class_counts(ds, short.as_mut_ptr(), short.len()), LtStatus::BufferTooSmall);

        let dir = tempfile::tempdir().unwrap();
        let path = cstr(dir.path().join("ds.json").to_str().unwrap());
        assert_eq!(lt_dataset_save(ds, path.as_ptr()), LtStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(lt_dataset_load(path.as_ptr(), &mut loaded), LtStatus::Ok);
        let mut again = [0usize; 6];
        lt_dataset_class_counts(loaded, again.as_mut_ptr(), again.len());
        assert_eq!(counts, again);

        lt_dataset_free(loaded);
        lt_dataset_free(ds);
    }
}

#[test]
fn default_config_when_null() {
    let ds = generate(None);
    unsafe {
        assert_eq!(lt_dataset_num_classes(ds), 20);
        assert_eq!(lt_dataset_num_samples(ds), 2000);
        lt_dataset_free(ds);
    }
}

#[test]
fn invalid_arguments_report_status_and_message() {
    unsafe {
        let bad = cstr(r#"{"num_classes": 10, "num_samples": 5}"#);
        let mut ds = ptr::null_mut();
        assert_eq!(lt_dataset_generate(bad.as_ptr(), &mut ds), LtStatus::Validation);
        assert!(ds.is_null());
        assert!(last_error().contains("num_samples"), "{}", last_error());

        assert_eq!(lt_dataset_generate(ptr::null(), ptr::null_mut()), LtStatus::InvalidArgument);

        let missing = cstr("/nonexistent/ds.json");
        assert_eq!(lt_dataset_load(missing.as_ptr(), &mut ds), LtStatus::Io);

        let unknown = cstr(r#"{"classes": 3}"#);
        assert_eq!(lt_dataset_generate(unknown.as_ptr(), &mut ds), LtStatus::Validation);

        // null handles are tolerated by accessors and destructors
        assert_eq!(lt_dataset_num_samples(ptr::null()), 0);
        lt_dataset_free(ptr::null_mut());
        lt_run_free(ptr::null_mut());
        lt_string_free(ptr::null_mut());
    }
}

#[test]
fn average_precision_matches_hand_value() {
    // ranking: +, -, + gives (1/1 + 2/3) / 2
    let scores = [0.9, 0.5, 0.1];
    let labels = [1u8, 0, 1];
    let mut ap = 0.0;
    unsafe {
        assert_eq!(lt_average_precision(scores.as_ptr(), labels.as_ptr(), 3, &mut ap), LtStatus::Ok);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);

        let none = [0u8; 3];
        assert_eq!(lt_average_precision(scores.as_ptr(), none.as_ptr(), 3, &mut ap), LtStatus::Undefined);

        let bad = [1u8, 2, 0];
        assert_eq!(lt_average_precision(scores.as_ptr(), bad.as_ptr(), 3, &mut ap), LtStatus::Validation);
    }
}

#[test]
fn train_and_inspect_run() {
    let train = generate(Some(SMALL_SYNTH));
    let mut eval = ptr::null_mut();
    let synth = cstr(SMALL_SYNTH);
    let run_cfg = cstr(SMALL_RUN);
    unsafe {
        assert_eq!(lt_dataset_generate_eval(synth.as_ptr(), 200, &mut eval), LtStatus::Ok);
        assert_eq!(lt_dataset_num_samples(eval), 200);

        let mut run = ptr::null_mut();
        assert_eq!(lt_train(train, eval, run_cfg.as_ptr(), &mut run), LtStatus::Ok);
        assert!(!lt_run_failed(run));
        assert_eq!(lt_run_num_epochs(run), 2);

        let mut total = f64::NAN;
        assert_eq!(lt_run_final_map(run, LtGroup::Total, &mut total), LtStatus::Ok);
        assert!((0.0..=1.0).contains(&total));

        let mut delta0 = 0.0;
        assert_eq!(lt_run_mean_positive_delta(run, 0, &mut delta0), LtStatus::Ok);
        assert!(delta0.is_finite() && delta0 >= 0.0);
        assert_eq!(lt_run_mean_positive_delta(run, 99, &mut delta0), LtStatus::Undefined);

        let mut json = ptr::null_mut();
        assert_eq!(lt_run_record_json(run, &mut json), LtStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        lt_string_free(json);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["history"].as_array().unwrap().len(), 2);

        let dir = tempfile::tempdir().unwrap();
        let out = cstr(dir.path().join("run").to_str().unwrap());
        assert_eq!(lt_run_write(run, out.as_ptr(), false), LtStatus::Ok);
        for f in ["config.json", "metrics.csv", "prompts.ckpt.json", "run.json"] {
            assert!(dir.path().join("run").join(f).is_file(), "{f}");
        }
        assert_eq!(lt_run_write(run, out.as_ptr(), false), LtStatus::Io);
        assert_eq!(lt_run_write(run, out.as_ptr(), true), LtStatus::Ok);

        lt_run_free(run);
        lt_dataset_free(eval);
        lt_dataset_free(train);
    }
}

#[test]
fn train_rejects_bad_config() {
    let train = generate(Some(SMALL_SYNTH));
    let cfg = cstr(r#"{"train": {"epochs": 0}}"#);
    let mut run = ptr::null_mut();
    unsafe {
        assert_eq!(lt_train(train, train, cfg.as_ptr(), &mut run), LtStatus::Validation);
        assert!(run.is_null());
        assert!(last_error().contains("epochs"));
        assert_eq!(lt_train(ptr::null(), train, ptr::null(), &mut run), LtStatus::InvalidArgument);
        lt_dataset_free(train);
    }
}

#[test]
fn gradcheck_trials_pass() {
    let mut worst = f64::NAN;
    let mut failed = usize::MAX;
    unsafe {
        assert_eq!(lt_gradcheck_trials(11, 6, &mut worst, &mut failed), LtStatus::Ok);
    }
    assert_eq!(failed, 0);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn header_declares_every_entry_point() {
    let header = include_str!("../include/ltprompt.h");
    for name in [
        "lt_last_error_message",
        "lt_string_free",
        "lt_dataset_generate",
        "lt_dataset_generate_eval",
        "lt_dataset_load",
        "lt_dataset_save",
        "lt_dataset_free",
        "lt_dataset_class_counts",
        "lt_average_precision",
        "lt_train",
        "lt_run_final_map",
        "lt_run_mean_positive_delta",
        "lt_run_write",
        "lt_run_record_json",
        "lt_run_free",
        "lt_gradcheck_trials",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name}");
    }
    assert!(header.contains("typedef struct LtDataset LtDataset;"));
}
