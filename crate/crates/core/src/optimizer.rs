//! Projected gradient descent over the PSD cone with a pluggable gradient preconditioner.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::denoiser::gaussian_filter_precondition;
use crate::diffusion::{reverse_sample, DiffusionSchedule, EpsModel, NoisyGradient, ReverseOptions};
use crate::error::{Error, Result};
use crate::linalg::{project_psd, sym_eigendecompose, SymMatrix};
use crate::objective::{gradient, objective_value, GradientSample, ObjectiveConfig};
use crate::rng::SeedStream;
use crate::sensing::{MeasurementSet, ProjectionEnsemble};

/// The estimation problem: measurements, their projections and the objective settings.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub meas: &'a MeasurementSet,
    pub proj: &'a ProjectionEnsemble,
    pub cfg: &'a ObjectiveConfig,
}

impl Problem<'_> {
    pub fn objective(&self, sigma: &SymMatrix) -> Result<f64> {
        objective_value(sigma, self.meas, self.proj, self.cfg)
    }

    pub fn gradient(&self, sigma: &SymMatrix) -> Result<GradientSample> {
        gradient(sigma, self.meas, self.proj, self.cfg)
    }

    pub fn dim(&self) -> usize {
        self.proj.ambient_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmijoConfig {
    pub c: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoConfig {
    fn default() -> Self {
        Self { c: 1e-4, shrink: 0.5, max_backtracks: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PreconditionerKind {
    Identity,
    Gaussian {
        kernel_sigma: f64,
    },
    Diffusion {
        /// Reverse-chain start step; by default the step whose partition count matches the problem.
        #[serde(default)]
        start_step: Option<usize>,
        /// Multiplier on the reverse-chain noise `σ_k`.
        #[serde(default = "one")]
        sigma_scale: f64,
        /// Denoise every `every`-th iteration and use the raw gradient otherwise.
        #[serde(default = "one_usize")]
        every: usize,
    },
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl PreconditionerKind {
    pub fn name(&self) -> &'static str {
        match self {
            PreconditionerKind::Identity => "identity",
            PreconditionerKind::Gaussian { .. } => "gaussian",
            PreconditionerKind::Diffusion { .. } => "diffusion",
        }
    }

    pub fn gaussian() -> Self {
        PreconditionerKind::Gaussian { kernel_sigma: 1.0 }
    }

    pub fn diffusion() -> Self {
        PreconditionerKind::Diffusion { start_step: None, sigma_scale: 1.0, every: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// `μ·I` with `μ = mean_i(tr S̃_i − m σ_N²) / l`.
    #[default]
    ScaledIdentity,
    /// `P_D((1/p) Σᵢ P_i S̃_i P_iᵀ)`.
    Backprojection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Initial step; `None` uses `1 / (2 Σᵢ ‖P_i‖₂⁴)`.
    pub lambda0: Option<f64>,
    pub armijo: ArmijoConfig,
    pub max_iters: usize,
    /// Stopping threshold on the preconditioned gradient norm; `None` uses `1e-6 · l`.
    pub tol_grad: Option<f64>,
    pub tol_obj: f64,
    /// Consecutive small-decrease iterations before stopping.
    pub patience: usize,
    pub preconditioner: PreconditionerKind,
    pub init: InitKind,
    /// Fill the trace's wall-clock column; off by default so traces are reproducible.
    pub record_time: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda0: None,
            armijo: ArmijoConfig::default(),
            max_iters: 500,
            tol_grad: None,
            tol_obj: 1e-8,
            patience: 5,
            preconditioner: PreconditionerKind::Identity,
            init: InitKind::ScaledIdentity,
            record_time: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.armijo;
        if !(a.c > 0.0 && a.c < 1.0) || !(a.shrink > 0.0 && a.shrink < 1.0) {
            return Err(Error::invalid("Armijo constants must lie in (0, 1)"));
        }
        if a.max_backtracks == 0 || self.max_iters == 0 || self.patience == 0 {
            return Err(Error::invalid("iteration budgets must be positive"));
        }
        if matches!(self.lambda0, Some(l) if !(l > 0.0)) || matches!(self.tol_grad, Some(t) if !(t > 0.0)) {
            return Err(Error::invalid("lambda0 and tol_grad must be positive"));
        }
        if !(self.tol_obj > 0.0) {
            return Err(Error::invalid("tol_obj must be positive"));
        }
        match self.preconditioner {
            PreconditionerKind::Gaussian { kernel_sigma } if !(kernel_sigma > 0.0) => {
                Err(Error::invalid("Gaussian kernel sigma must be positive"))
            }
            PreconditionerKind::Diffusion { sigma_scale, every, .. } if !(sigma_scale >= 0.0) || every == 0 => {
                Err(Error::invalid("diffusion sigma_scale must be >= 0 and every >= 1"))
            }
            _ => Ok(()),
        }
    }
}

/// A trained noise model together with the schedule it was trained for.
#[derive(Clone, Copy)]
pub struct DiffusionContext<'a> {
    pub model: &'a (dyn EpsModel + Sync),
    pub schedule: &'a DiffusionSchedule,
}

/// Applies the preconditioner to `g`. `partitions` selects the default reverse-chain start step.
pub fn precondition(
    g: &SymMatrix,
    kind: &PreconditionerKind,
    ctx: Option<DiffusionContext<'_>>,
    partitions: usize,
    seed: SeedStream,
) -> Result<SymMatrix> {
    match *kind {
        PreconditionerKind::Identity => Ok(g.clone()),
        PreconditionerKind::Gaussian { kernel_sigma } => gaussian_filter_precondition(g, kernel_sigma),
        PreconditionerKind::Diffusion { start_step, sigma_scale, .. } => {
            let ctx = ctx.ok_or_else(|| Error::Config("diffusion preconditioner needs a trained model".into()))?;
            let s = ctx.schedule;
            let start = match start_step {
                Some(k) if k >= 1 && k <= s.steps() => k,
                Some(k) => return Err(Error::Config(format!("start step {k} outside 1..={}", s.steps()))),
                None => s.step_for_partitions(partitions).unwrap_or(1),
            };
            let c = s.scale_c();
            let x = NoisyGradient { value: g.scaled(s.alpha_bar(start).sqrt() / c), step: start, scale: c };
            let out = reverse_sample(&x, s, ctx.model, seed, ReverseOptions { sigma_scale, keep_path: false })?;
            Ok(out.x0.value.scaled(c))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmijoOutcome {
    pub lambda: f64,
    pub sigma_next: SymMatrix,
    pub f_next: f64,
    pub stalled: bool,
}

/// Backtracks from `lambda0` until `f(P_D(σ − λd)) ≤ f(σ) − c·λ·‖d‖_F²`.
/// On failure returns `λ = 0`, the unchanged iterate, and `stalled = true`.
pub fn armijo_step(
    sigma: &SymMatrix,
    f_sigma: f64,
    direction: &SymMatrix,
    f: &dyn Fn(&SymMatrix) -> Result<f64>,
    lambda0: f64,
    cfg: &ArmijoConfig,
) -> Result<ArmijoOutcome> {
    let stall = || ArmijoOutcome { lambda: 0.0, sigma_next: sigma.clone(), f_next: f_sigma, stalled: true };
    let dd = direction.dot(direction);
    if dd == 0.0 {
        return Ok(stall());
    }
    let mut lambda = lambda0;
    for _ in 0..=cfg.max_backtracks {
        let candidate = project_psd(&sigma.add_scaled(-lambda, direction)?)?;
        let fc = f(&candidate)?;
        if fc <= f_sigma - cfg.c * lambda * dd {
            return Ok(ArmijoOutcome { lambda, sigma_next: candidate, f_next: fc, stalled: false });
        }
        lambda *= cfg.shrink;
    }
    Ok(stall())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    ObjectivePlateau,
    LineSearchStall,
    MaxIterations,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// Objective after this iteration's step.
    pub objective: f64,
    pub grad_norm: f64,
    pub precond_grad_norm: f64,
    pub lambda: f64,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    pub initial_objective: f64,
    pub rows: Vec<TraceRow>,
    pub stop: StopReason,
    /// Objective of the returned estimate.
    pub best_objective: f64,
}

pub const TRACE_HEADER: &str = "iter,objective,grad_norm,precond_grad_norm,lambda,millis";

impl SolveTrace {
    pub fn iterations(&self) -> usize {
        self.rows.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.3}",
                r.iter, r.objective, r.grad_norm, r.precond_grad_norm, r.lambda, r.millis
            )
            .expect("write to string");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Starting point for [`pgd_run`].
pub fn initial_estimate(problem: &Problem<'_>, kind: InitKind) -> Result<SymMatrix> {
    let l = problem.dim();
    match kind {
        InitKind::ScaledIdentity => {
            let m = problem.proj.compressed_dim() as f64;
            let noise = m * problem.meas.sigma_n * problem.meas.sigma_n;
            let mean_trace = problem.meas.s_tilde.iter().map(|s| s.trace() - noise).sum::<f64>()
                / problem.meas.partitions() as f64;
            Ok(SymMatrix::identity(l).scaled((mean_trace / l as f64).max(0.0)))
        }
        InitKind::Backprojection => {
            let mut acc = SymMatrix::zeros(l);
            for (p, s) in problem.proj.matrices().iter().zip(&problem.meas.s_tilde) {
                let b = crate::linalg::symmetrize(&p.matmul(&s.matmul_t(p)?)?)?;
                acc = acc.add(&b)?;
            }
            project_psd(&acc.scaled(1.0 / problem.proj.partitions() as f64))
        }
    }
}

fn is_psd(a: &SymMatrix) -> Result<bool> {
    let tol = 1e-9 * a.frobenius_norm();
    Ok(sym_eigendecompose(a)?.min_eigenvalue() >= -tol)
}

/// Runs projected gradient descent from `init` and returns the best iterate seen.
///
/// Iteration `t` draws any preconditioner randomness from child stream `t` of `seed`.
pub fn pgd_run(
    problem: &Problem<'_>,
    init: &SymMatrix,
    solver: &SolverConfig,
    ctx: Option<DiffusionContext<'_>>,
    seed: SeedStream,
) -> Result<(SymMatrix, SolveTrace)> {
    pgd_run_observed(problem, init, solver, ctx, seed, &mut |_, _| {})
}

/// [`pgd_run`] that also hands every accepted iterate to `observe`, starting with the
/// (projected) initial point at index 0.
pub fn pgd_run_observed(
    problem: &Problem<'_>,
    init: &SymMatrix,
    solver: &SolverConfig,
    ctx: Option<DiffusionContext<'_>>,
    seed: SeedStream,
    observe: &mut dyn FnMut(usize, &SymMatrix),
) -> Result<(SymMatrix, SolveTrace)> {
    solver.validate()?;
    if init.dim() != problem.dim() {
        return Err(Error::dim(format!("init is {0}x{0}, problem is {1}x{1}", init.dim(), problem.dim())));
    }
    if matches!(solver.preconditioner, PreconditionerKind::Diffusion { .. }) && ctx.is_none() {
        return Err(Error::Config("diffusion preconditioner needs a trained model".into()));
    }
    let l = problem.dim();
    let lambda0 = match solver.lambda0 {
        Some(v) => v,
        None => 1.0 / (2.0 * problem.proj.spectral_norm_fourth_sum()?),
    };
    let tol_grad = solver.tol_grad.unwrap_or(1e-6 * l as f64);
    let f = |s: &SymMatrix| problem.objective(s);

    let mut sigma = if is_psd(init)? { init.clone() } else { project_psd(init)? };
    observe(0, &sigma);
    let mut f_cur = f(&sigma)?;
    let mut trace = SolveTrace {
        initial_objective: f_cur,
        rows: Vec::new(),
        stop: StopReason::MaxIterations,
        best_objective: f_cur,
    };
    if !f_cur.is_finite() {
        trace.stop = StopReason::NonFinite;
        return Ok((sigma, trace));
    }
    let mut best = sigma.clone();
    let mut plateau = 0;
    let clock = Instant::now();

    for it in 0..solver.max_iters {
        let g = problem.gradient(&sigma)?;
        let use_model = match solver.preconditioner {
            PreconditionerKind::Diffusion { every, .. } => it % every == 0,
            _ => true,
        };
        let d = if use_model {
            precondition(&g.grad, &solver.preconditioner, ctx, problem.proj.partitions(), seed.child(it as u64))?
        } else {
            g.grad.clone()
        };
        let grad_norm = g.grad.frobenius_norm();
        let precond_norm = d.frobenius_norm();
        let mut row = TraceRow {
            iter: it,
            objective: f_cur,
            grad_norm,
            precond_grad_norm: precond_norm,
            lambda: 0.0,
            millis: 0.0,
        };
        let stamp = |row: &mut TraceRow| {
            if solver.record_time {
                row.millis = clock.elapsed().as_secs_f64() * 1e3;
            }
        };
        if !precond_norm.is_finite() {
            stamp(&mut row);
            trace.rows.push(row);
            trace.stop = StopReason::NonFinite;
            break;
        }
        if precond_norm <= tol_grad {
            stamp(&mut row);
            trace.rows.push(row);
            trace.stop = StopReason::GradientTolerance;
            break;
        }
        let step = armijo_step(&sigma, f_cur, &d, &f, lambda0, &solver.armijo)?;
        row.lambda = step.lambda;
        row.objective = step.f_next;
        stamp(&mut row);
        trace.rows.push(row);
        if step.stalled {
            trace.stop = StopReason::LineSearchStall;
            break;
        }
        if !step.f_next.is_finite() {
            trace.stop = StopReason::NonFinite;
            break;
        }
        let rel = (f_cur - step.f_next) / f_cur.abs().max(f64::MIN_POSITIVE);
        sigma = step.sigma_next;
        f_cur = step.f_next;
        observe(it + 1, &sigma);
        if f_cur < trace.best_objective {
            trace.best_objective = f_cur;
            best = sigma.clone();
        }
        plateau = if rel < solver.tol_obj { plateau + 1 } else { 0 };
        if plateau >= solver.patience {
            trace.stop = StopReason::ObjectivePlateau;
            break;
        }
    }
    Ok((best, trace))
}
