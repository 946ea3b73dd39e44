use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use survfuse_ffi::*;
use tempfile::TempDir;

const SMALL: &str = "\
k_folds = 2
epochs = 1
[smoothing]
enabled = false
[cohort]
n_patients = 60
";

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe { sf_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

/// A cohort and one trained fold model in a temp dir.
fn fixture() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();
    let d = dir.path().to_str().unwrap();
    survfuse::cli::run_from(["survfuse", "gen-cohort", "--config", cfg, "--out", d]).unwrap();
    let cohort = dir.path().join("cohort.csv");
    let run = dir.path().join("run");
    survfuse::cli::run_from([
        "survfuse", "train", "--config", cfg, "--cohort", cohort.to_str().unwrap(),
        "--out", run.to_str().unwrap(), "--save-models",
    ])
    .unwrap();
    let model = run.join("models/fold_00.ckpt");
    (dir, cohort, model)
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn cox_primitives_match_the_library() {
    let theta = [0.3, -1.2, 0.8, 0.1];
    let times = [2.0, 5.0, 1.0, 5.0];
    let events = [1u8, 0, 1, 1];
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    let mut c = 0.0;
    unsafe {
        assert_eq!(sf_cox_loss(theta.as_ptr(), times.as_ptr(), events.as_ptr(), 4, &mut loss), SfStatus::Ok);
        assert_eq!(sf_cox_gradient(theta.as_ptr(), times.as_ptr(), events.as_ptr(), 4, grad.as_mut_ptr()), SfStatus::Ok);
        assert_eq!(sf_concordance_index(theta.as_ptr(), times.as_ptr(), events.as_ptr(), 4, &mut c), SfStatus::Ok);
    }
    let ev: Vec<bool> = events.iter().map(|&e| e != 0).collect();
    let batch = survfuse::survival::CoxBatch::from_times(&times, &ev).unwrap();
    assert_eq!(loss, survfuse::survival::cox_loss(&theta, &batch).unwrap());
    assert_eq!(grad.to_vec(), survfuse::survival::cox_gradient(&theta, &batch).unwrap());
    assert_eq!(c, survfuse::survival::concordance_index(&theta, &times, &ev).unwrap());
}

#[test]
fn errors_are_reported_with_a_message() {
    let times = [1.0, 2.0];
    let events = [0u8, 0];
    let theta = [0.0, 1.0];
    let mut c = 0.0;
    let st = unsafe { sf_concordance_index(theta.as_ptr(), times.as_ptr(), events.as_ptr(), 2, &mut c) };
    assert_eq!(st, SfStatus::Undefined);
    assert!(last_error().contains("comparable"), "{}", last_error());

    let st = unsafe { sf_cox_loss(theta.as_ptr(), ptr::null(), events.as_ptr(), 2, &mut c) };
    assert_eq!(st, SfStatus::NullPointer);
    assert!(last_error().contains("times"));

    let nan = [f64::NAN, 0.0];
    let st = unsafe { sf_cox_loss(nan.as_ptr(), times.as_ptr(), events.as_ptr(), 2, &mut c) };
    assert_ne!(st, SfStatus::Ok);

    let mut o = sf_modulation_options_default();
    o.rho_min = 5.0;
    o.rho_max = 1.0;
    let mut r = SfContribution::default();
    let st = unsafe {
        sf_contribution_ratio(theta.as_ptr(), theta.as_ptr(), times.as_ptr(), [1u8, 1].as_ptr(), 2, &o, &mut r)
    };
    assert_eq!(st, SfStatus::InvalidArgument);
}

#[test]
fn truncated_error_messages_stay_terminated() {
    let mut c = 0.0;
    unsafe { sf_cox_loss(ptr::null(), ptr::null(), ptr::null(), 3, &mut c) };
    let mut buf = [1 as c_char; 5];
    let full = unsafe { sf_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(full > 4);
    assert_eq!(buf[4], 0);
    assert_eq!(unsafe { sf_last_error(ptr::null_mut(), 0) }, full);
}

#[test]
fn contribution_ratio_is_reciprocal() {
    let sg = [0.5, -0.2, 1.0, 0.3];
    let sp = [0.1, 0.4, -0.3, 0.2];
    let times = [1.0, 2.0, 3.0, 4.0];
    let events = [1u8, 1, 0, 1];
    let mut r = SfContribution::default();
    let st = unsafe {
        sf_contribution_ratio(sg.as_ptr(), sp.as_ptr(), times.as_ptr(), events.as_ptr(), 4, ptr::null(), &mut r)
    };
    assert_eq!(st, SfStatus::Ok);
    assert!((r.rho_g * r.rho_p - 1.0).abs() < 1e-12);
    assert_eq!(r.factor_g, sf_modulation_factor(r.rho_g));
    assert!(r.factor_g.min(r.factor_p) <= 1.0 && r.factor_g.max(r.factor_p) == 1.0);
}

#[test]
fn handles_predict_and_evaluate() {
    let (_dir, cohort_path, model_path) = fixture();
    let mut cohort: *mut SfCohort = ptr::null_mut();
    let mut model: *mut SfModel = ptr::null_mut();
    unsafe {
        assert_eq!(sf_cohort_load(cstr(&cohort_path).as_ptr(), &mut cohort), SfStatus::Ok);
        assert_eq!(sf_model_load(cstr(&model_path).as_ptr(), &mut model), SfStatus::Ok);
        let n = sf_cohort_len(cohort);
        assert_eq!(n, 60);
        let mut theta = vec![0.0; n];
        assert_eq!(sf_model_predict(model, cohort, theta.as_mut_ptr(), n), SfStatus::Ok);
        assert!(theta.iter().all(|t| t.is_finite()));
        assert_eq!(sf_model_predict(model, cohort, theta.as_mut_ptr(), n - 1), SfStatus::Config);

        let (mut c, mut loss) = (0.0, 0.0);
        assert_eq!(sf_model_evaluate(model, cohort, &mut c, &mut loss), SfStatus::Ok);
        let times: Vec<f64> = survfuse::cohort::load_cohort(&cohort_path).unwrap().iter().map(|r| r.time).collect();
        let events: Vec<bool> = survfuse::cohort::load_cohort(&cohort_path).unwrap().iter().map(|r| r.event).collect();
        assert_eq!(c, survfuse::survival::concordance_index(&theta, &times, &events).unwrap());

        sf_model_free(model);
        sf_cohort_free(cohort);
        sf_cohort_free(ptr::null_mut());
    }
}

#[test]
fn loading_missing_files_fails_cleanly() {
    let mut cohort: *mut SfCohort = 1 as *mut SfCohort;
    let path = CString::new("/nonexistent/cohort.csv").unwrap();
    assert_eq!(unsafe { sf_cohort_load(path.as_ptr(), &mut cohort) }, SfStatus::Io);
    assert!(cohort.is_null());
    let mut model: *mut SfModel = ptr::null_mut();
    assert_eq!(unsafe { sf_model_load(ptr::null(), &mut model) }, SfStatus::NullPointer);
}

#[test]
fn c_program_links_against_the_header() {
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|c| Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    // the fresh staticlib sits next to the test binary in target/<profile>/deps
    let staticlib = std::env::current_exe().unwrap().with_file_name("libsurvfuse_ffi.a");
    assert!(staticlib.exists(), "{} missing", staticlib.display());

    let (dir, cohort, model) = fixture();
    let exe = dir.path().join("smoke");
    let out = Command::new(cc)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run = Command::new(&exe).arg(&cohort).arg(&model).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.starts_with("60 "), "{stdout}");
}
