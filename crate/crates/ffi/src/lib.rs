//! C ABI over the covdiff estimator.
//!
//! Handles are opaque and owned by the caller once created; release them with the
//! matching `_free` function. Every fallible call returns a [`CovdiffStatus`] and,
//! on failure, records a message retrievable with [`covdiff_last_error_message`]
//! on the same thread. Matrices are dense row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use covdiff::data::DataMatrix;
use covdiff::denoiser::{load_params, DenoiserParams};
use covdiff::diffusion::DiffusionSchedule;
use covdiff::eval::{Method, MethodSettings};
use covdiff::linalg::Matrix;
use covdiff::objective::ObjectiveConfig;
use covdiff::optimizer::{initial_estimate, pgd_run, DiffusionContext, Problem, SolverConfig};
use covdiff::pipeline::observe;
use covdiff::rng::SeedStream;
use covdiff::sensing::{MeasurementSet, ProjectionEnsemble, SensingConfig};
use covdiff::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovdiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numerical = 4,
    Format = 5,
    MissingArtifact = 6,
    Io = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovdiffMethod {
    Identity = 0,
    Gaussian = 1,
    Diffusion = 2,
}

/// Partitioned compressive measurements of one data set.
pub struct CovdiffProblem {
    l: usize,
    proj: ProjectionEnsemble,
    meas: MeasurementSet,
}

/// A noise-prediction network with the schedule it was trained for.
pub struct CovdiffModel {
    schedule: DiffusionSchedule,
    params: DenoiserParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CovdiffStatus {
    match e {
        Error::Dimension(_) => CovdiffStatus::Dimension,
        Error::Numerical { .. } | Error::Definiteness { .. } | Error::Calibration(_) | Error::TrainingDiverged { .. } => {
            CovdiffStatus::Numerical
        }
        Error::Format(_) | Error::Json(_) => CovdiffStatus::Format,
        Error::MissingArtifact(_) => CovdiffStatus::MissingArtifact,
        Error::Io(_) => CovdiffStatus::Io,
        _ => CovdiffStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (CovdiffStatus, String)>) -> CovdiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CovdiffStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            CovdiffStatus::Panic
        }
    }
}

fn lift(e: Error) -> (CovdiffStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CovdiffStatus, String) {
    (CovdiffStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (CovdiffStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CovdiffStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn covdiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the last error message on this thread, excluding the NUL; 0 if none.
#[no_mangle]
pub extern "C" fn covdiff_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to `len - 1` bytes).
/// Returns the number of bytes written excluding the NUL.
///
/// # Safety
/// `buf` must be valid for `len` bytes of writes, or null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn covdiff_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        let n = bytes.len().min(len - 1);
        std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Partitions the `l × n` data (one sample per column) into `p` blocks, projects each
/// to `m` dimensions with sensing noise `sigma_n`, and stores the result in `*out`.
///
/// # Safety
/// `data` must point to `l * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn covdiff_problem_new(
    data: *const f64,
    l: usize,
    n: usize,
    m: usize,
    p: usize,
    sigma_n: f64,
    seed: u64,
    out: *mut *mut CovdiffProblem,
) -> CovdiffStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let len = l.checked_mul(n).ok_or((CovdiffStatus::InvalidArgument, "l * n overflows".to_string()))?;
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let x = DataMatrix::new(Matrix::from_vec(l, n, values).map_err(lift)?).map_err(lift)?;
        let sensing = SensingConfig { l, m, p, sigma_n };
        let (_, proj, meas) = observe(&x, &sensing, SeedStream::new(seed)).map_err(lift)?;
        *out = Box::into_raw(Box::new(CovdiffProblem { l, proj, meas }));
        Ok(())
    })
}

/// # Safety
/// `problem` must come from [`covdiff_problem_new`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn covdiff_problem_free(problem: *mut CovdiffProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Band count of a problem, or 0 for null.
///
/// # Safety
/// `problem` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn covdiff_problem_bands(problem: *const CovdiffProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.l)
}

/// Loads a schedule JSON and a weight container.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn covdiff_model_load(
    schedule_path: *const c_char,
    weights_path: *const c_char,
    out: *mut *mut CovdiffModel,
) -> CovdiffStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let schedule = DiffusionSchedule::load(path_arg(schedule_path, "schedule_path")?).map_err(lift)?;
        let weights = path_arg(weights_path, "weights_path")?;
        if !weights.exists() {
            return Err(lift(Error::MissingArtifact(weights)));
        }
        let params = load_params(&weights).map_err(lift)?;
        *out = Box::into_raw(Box::new(CovdiffModel { schedule, params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`covdiff_model_load`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn covdiff_model_free(model: *mut CovdiffModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs projected gradient descent with the chosen preconditioner and writes the
/// `l × l` estimate to `out_sigma`. `model` may be null unless `method` is diffusion.
/// `max_iters == 0` keeps the default budget. `out_iters` may be null.
///
/// # Safety
/// `problem` must be a live handle, `model` null or live, `out_sigma` writable for `l * l` doubles.
#[no_mangle]
pub unsafe extern "C" fn covdiff_estimate(
    problem: *const CovdiffProblem,
    model: *const CovdiffModel,
    method: CovdiffMethod,
    max_iters: usize,
    seed: u64,
    out_sigma: *mut f64,
    out_iters: *mut usize,
) -> CovdiffStatus {
    guard(|| {
        let pr = problem.as_ref().ok_or_else(|| null("problem"))?;
        if out_sigma.is_null() {
            return Err(null("out_sigma"));
        }
        let method = match method {
            CovdiffMethod::Identity => Method::Identity,
            CovdiffMethod::Gaussian => Method::Gaussian,
            CovdiffMethod::Diffusion => Method::Diffusion,
        };
        let ctx = match model.as_ref() {
            Some(m) => Some(DiffusionContext { model: &m.params, schedule: &m.schedule }),
            None if method == Method::Diffusion => {
                return Err((CovdiffStatus::InvalidArgument, "diffusion needs a model".into()));
            }
            None => None,
        };
        let cfg = ObjectiveConfig::default();
        let problem = Problem { meas: &pr.meas, proj: &pr.proj, cfg: &cfg };
        let mut solver = SolverConfig { preconditioner: MethodSettings::default().kind(method), ..Default::default() };
        if max_iters > 0 {
            solver.max_iters = max_iters;
        }
        let init = initial_estimate(&problem, solver.init).map_err(lift)?;
        let (est, trace) = pgd_run(&problem, &init, &solver, ctx, SeedStream::new(seed)).map_err(lift)?;
        std::ptr::copy_nonoverlapping(est.as_slice().as_ptr(), out_sigma, pr.l * pr.l);
        if !out_iters.is_null() {
            *out_iters = trace.iterations();
        }
        Ok(())
    })
}

/// `(1/l²)·‖a − b‖_F²` for two `l × l` matrices.
///
/// # Safety
/// `a` and `b` must point to `l * l` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn covdiff_mse(a: *const f64, b: *const f64, l: usize, out: *mut f64) -> CovdiffStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let len = l * l;
        let ma = Matrix::from_vec(l, l, std::slice::from_raw_parts(a, len).to_vec()).map_err(lift)?;
        let mb = Matrix::from_vec(l, l, std::slice::from_raw_parts(b, len).to_vec()).map_err(lift)?;
        *out = covdiff::eval::mse(&ma, &mb).map_err(lift)?;
        Ok(())
    })
}
