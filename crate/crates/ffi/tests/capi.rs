use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use covdiff::data::{sample_gaussian_data, toeplitz};
use covdiff::denoiser::{save_params, Architecture, DenoiserParams};
use covdiff::diffusion::DiffusionSchedule;
use covdiff::rng::SeedStream;
use covdiff_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    let n = unsafe { covdiff_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, covdiff_last_error_length().min(511));
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn sample(l: usize, n: usize) -> Vec<f64> {
    sample_gaussian_data(&toeplitz(l, 0.8), n, SeedStream::new(3)).unwrap().as_matrix().as_slice().to_vec()
}

fn problem(l: usize, n: usize, m: usize, p: usize) -> *mut CovdiffProblem {
    let data = sample(l, n);
    let mut out = ptr::null_mut();
    let st = unsafe { covdiff_problem_new(data.as_ptr(), l, n, m, p, 0.01, 7, &mut out) };
    assert_eq!(st, CovdiffStatus::Ok, "{}", last_error());
    out
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(covdiff_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_and_invalid_arguments_report_codes_and_messages() {
    let mut out = ptr::null_mut();
    let st = unsafe { covdiff_problem_new(ptr::null(), 8, 64, 3, 4, 0.0, 0, &mut out) };
    assert_eq!(st, CovdiffStatus::NullPointer);
    assert!(last_error().contains("data"));
    assert!(out.is_null());

    let data = sample(8, 60);
    let st = unsafe { covdiff_problem_new(data.as_ptr(), 8, 60, 3, 7, 0.0, 0, &mut out) };
    assert_eq!(st, CovdiffStatus::InvalidArgument);
    assert!(last_error().contains("does not divide"));

    let st = unsafe { covdiff_problem_new(data.as_ptr(), 8, 60, 8, 4, 0.0, 0, &mut out) };
    assert_eq!(st, CovdiffStatus::InvalidArgument);

    let mut buf = [0 as std::ffi::c_char; 4];
    let n = unsafe { covdiff_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, 3);
    assert_eq!(buf[3], 0);
}

#[test]
fn identity_estimate_is_symmetric_and_deterministic() {
    let l = 8;
    let pr = problem(l, 1024, 4, 16);
    assert_eq!(unsafe { covdiff_problem_bands(pr) }, l);
    let mut a = vec![0.0; l * l];
    let mut b = vec![0.0; l * l];
    let mut iters = 0usize;
    unsafe {
        assert_eq!(
            covdiff_estimate(pr, ptr::null(), CovdiffMethod::Identity, 200, 1, a.as_mut_ptr(), &mut iters),
            CovdiffStatus::Ok
        );
        assert_eq!(
            covdiff_estimate(pr, ptr::null(), CovdiffMethod::Identity, 200, 1, b.as_mut_ptr(), ptr::null_mut()),
            CovdiffStatus::Ok
        );
    }
    assert!(iters > 0 && iters <= 200);
    assert_eq!(a, b);
    for i in 0..l {
        for j in 0..l {
            assert_eq!(a[i * l + j], a[j * l + i]);
        }
    }
    let truth = toeplitz(l, 0.8);
    let mut err = 0.0;
    assert_eq!(unsafe { covdiff_mse(a.as_ptr(), truth.as_slice().as_ptr(), l, &mut err) }, CovdiffStatus::Ok);
    assert!(err < 0.05, "mse {err}");
    unsafe { covdiff_problem_free(pr) };
}

#[test]
fn diffusion_requires_a_model() {
    let pr = problem(8, 256, 3, 4);
    let mut out = vec![0.0; 64];
    let st = unsafe { covdiff_estimate(pr, ptr::null(), CovdiffMethod::Diffusion, 5, 0, out.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, CovdiffStatus::InvalidArgument);
    assert!(last_error().contains("model"));
    unsafe { covdiff_problem_free(pr) };
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn model_round_trip_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let sched_path = dir.path().join("schedule.json");
    let weights_path = dir.path().join("weights.cgdm");
    let mut model = ptr::null_mut();
    let st = unsafe { covdiff_model_load(cstr(&sched_path).as_ptr(), cstr(&weights_path).as_ptr(), &mut model) };
    assert_eq!(st, CovdiffStatus::MissingArtifact);
    assert!(last_error().contains("schedule.json"));

    DiffusionSchedule::from_betas(vec![0.01, 0.02], vec![4, 16], 3.0).unwrap().save(&sched_path).unwrap();
    let arch = Architecture { c1: 4, c2: 4, c3: 4, d_emb: 4 };
    save_params(&DenoiserParams::zeros(arch).unwrap(), &weights_path).unwrap();
    let st = unsafe { covdiff_model_load(cstr(&sched_path).as_ptr(), cstr(&weights_path).as_ptr(), &mut model) };
    assert_eq!(st, CovdiffStatus::Ok, "{}", last_error());

    let pr = problem(8, 256, 3, 4);
    let mut out = vec![0.0; 64];
    let st = unsafe { covdiff_estimate(pr, model, CovdiffMethod::Diffusion, 5, 0, out.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, CovdiffStatus::Ok, "{}", last_error());
    assert!(out.iter().all(|v| v.is_finite()));

    std::fs::write(&weights_path, b"not a container").unwrap();
    let mut bad = ptr::null_mut();
    let st = unsafe { covdiff_model_load(cstr(&sched_path).as_ptr(), cstr(&weights_path).as_ptr(), &mut bad) };
    assert_eq!(st, CovdiffStatus::Format);
    unsafe {
        covdiff_model_free(model);
        covdiff_problem_free(pr);
        covdiff_model_free(ptr::null_mut());
        covdiff_problem_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/covdiff.h");
    let header = std::fs::read_to_string(&header_path).unwrap();
    for name in [
        "covdiff_version",
        "covdiff_last_error_length",
        "covdiff_last_error_message",
        "covdiff_problem_new",
        "covdiff_problem_free",
        "covdiff_problem_bands",
        "covdiff_model_load",
        "covdiff_model_free",
        "covdiff_estimate",
        "covdiff_mse",
        "typedef struct CovdiffProblem CovdiffProblem",
        "COVDIFF_STATUS_MISSING_ARTIFACT = 6",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    // Syntax-check the header with the system C compiler when one is installed.
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, format!("#include \"{}\"\nint main(void) {{ return (int)covdiff_last_error_length(); }}\n", header_path.display())).unwrap();
    match std::process::Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg(&src).status() {
        Ok(status) => assert!(status.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler found; skipped compile check"),
    }
}
