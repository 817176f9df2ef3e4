//! Metrics, the paired preconditioner comparison, report CSV and heat maps.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigendecompose, Matrix, SymMatrix};
use crate::objective::ObjectiveConfig;
use crate::optimizer::{initial_estimate, pgd_run, DiffusionContext, PreconditionerKind, SolverConfig};
use crate::pipeline::{parallel_map, simulate, Scenario};
use crate::rng::SeedStream;

/// `(1/l²)·‖Σ̂ − Σ*‖_F²`.
pub fn mse(sigma_hat: &Matrix, sigma_true: &Matrix) -> Result<f64> {
    let d = sigma_hat.sub(sigma_true)?;
    Ok(d.dot(&d) / (d.rows() * d.cols()) as f64)
}

/// `‖Σ̂ − Σ*‖_F / ‖Σ*‖_F`.
pub fn rel_fro(sigma_hat: &Matrix, sigma_true: &Matrix) -> Result<f64> {
    Ok(sigma_hat.sub(sigma_true)?.frobenius_norm() / sigma_true.frobenius_norm())
}

/// Largest `r` such that each of the top `r` eigenvectors of `sigma_hat` has
/// `|cos| ≥ threshold` with the matching eigenvector of `sigma_true`.
///
/// Eigenvectors of repeated eigenvalues are basis-dependent, so the count is
/// only meaningful when `sigma_true` has a simple spectrum.
pub fn aligned_eigenvector_count(sigma_hat: &SymMatrix, sigma_true: &SymMatrix, threshold: f64) -> Result<usize> {
    if sigma_hat.dim() != sigma_true.dim() {
        return Err(Error::dim(format!("{} vs {} bands", sigma_hat.dim(), sigma_true.dim())));
    }
    let a = sym_eigendecompose(sigma_hat)?;
    let b = sym_eigendecompose(sigma_true)?;
    let l = sigma_true.dim();
    Ok((0..l)
        .take_while(|&j| {
            let (u, v) = (a.vector(j), b.vector(j));
            u.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>().abs() >= threshold
        })
        .count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Identity,
    Gaussian,
    Diffusion,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Identity, Method::Gaussian, Method::Diffusion];

    pub fn name(self) -> &'static str {
        match self {
            Method::Identity => "identity",
            Method::Gaussian => "gaussian",
            Method::Diffusion => "diffusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::format(format!("unknown method {s:?}")))
    }
}

/// Per-method preconditioner settings used by the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSettings {
    pub gaussian_sigma: f64,
    pub diffusion_start_step: Option<usize>,
    /// Multiplier on the reverse-chain noise; 0 runs the deterministic chain.
    pub diffusion_sigma_scale: f64,
    pub diffusion_every: usize,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self { gaussian_sigma: 1.0, diffusion_start_step: None, diffusion_sigma_scale: 0.0, diffusion_every: 1 }
    }
}

impl MethodSettings {
    pub fn kind(&self, method: Method) -> PreconditionerKind {
        match method {
            Method::Identity => PreconditionerKind::Identity,
            Method::Gaussian => PreconditionerKind::Gaussian { kernel_sigma: self.gaussian_sigma },
            Method::Diffusion => PreconditionerKind::Diffusion {
                start_step: self.diffusion_start_step,
                sigma_scale: self.diffusion_sigma_scale,
                every: self.diffusion_every,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub cos_threshold: f64,
    pub settings: MethodSettings,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seeds: (0..10).collect(), methods: Method::ALL.to_vec(), cos_threshold: 0.9, settings: MethodSettings::default() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.methods.is_empty() {
            return Err(Error::invalid("evaluation needs at least one seed and one method"));
        }
        if !(self.cos_threshold > 0.0 && self.cos_threshold < 1.0) {
            return Err(Error::invalid(format!("cos_threshold must lie in (0, 1), got {}", self.cos_threshold)));
        }
        Ok(())
    }
}

/// One row of the report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub method: Method,
    pub seed: u64,
    pub mse: f64,
    pub rel_fro: f64,
    pub aligned_eigs: usize,
    pub iters: usize,
    pub millis: f64,
}

pub const REPORT_HEADER: &str = "method,seed,mse,rel_fro,aligned_eigs,iters,millis";

/// Report CSV text; floats use the shortest representation that parses back exactly.
pub fn report_to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{:?},{:?},{},{},{:?}",
            r.method.name(),
            r.seed,
            r.mse,
            r.rel_fro,
            r.aligned_eigs,
            r.iters,
            r.millis
        )
        .expect("write to string");
    }
    out
}

pub fn report_from_csv(text: &str) -> Result<Vec<EvalRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::format(format!("report header must be {REPORT_HEADER:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::format(format!("report row {} has {} fields, expected 7", i + 1, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::format(format!("row {}: {s:?}: {e}", i + 1)));
            let int = |s: &str| s.parse::<u64>().map_err(|e| Error::format(format!("row {}: {s:?}: {e}", i + 1)));
            Ok(EvalRow {
                method: Method::parse(f[0])?,
                seed: int(f[1])?,
                mse: num(f[2])?,
                rel_fro: num(f[3])?,
                aligned_eigs: int(f[4])? as usize,
                iters: int(f[5])? as usize,
                millis: num(f[6])?,
            })
        })
        .collect()
}

pub fn write_report(path: impl AsRef<Path>, rows: &[EvalRow]) -> Result<()> {
    std::fs::write(path, report_to_csv(rows))?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<EvalRow>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    report_from_csv(&std::fs::read_to_string(path)?)
}

/// Result of one paired comparison.
#[derive(Debug, Clone)]
pub struct Comparison {
    /// Rows ordered by seed, then by method in the configured order.
    pub rows: Vec<EvalRow>,
    /// `estimates[s][j]` is seed `s`'s estimate from the `j`-th method that ran.
    pub estimates: Vec<Vec<(Method, SymMatrix)>>,
    pub truths: Vec<SymMatrix>,
    /// Why a method was skipped, if any was.
    pub notes: Vec<String>,
}

impl Comparison {
    pub fn metric(&self, method: Method, f: impl Fn(&EvalRow) -> f64) -> Vec<f64> {
        self.rows.iter().filter(|r| r.method == method).map(f).collect()
    }

    /// Median over seeds of `mse(a) / mse(b)`, or `None` if either method is missing.
    pub fn median_mse_ratio(&self, a: Method, b: Method) -> Option<f64> {
        let (xa, xb) = (self.metric(a, |r| r.mse), self.metric(b, |r| r.mse));
        if xa.is_empty() || xa.len() != xb.len() {
            return None;
        }
        median(&xa.iter().zip(&xb).map(|(x, y)| x / y).collect::<Vec<_>>())
    }

    pub fn median_aligned(&self, method: Method) -> Option<f64> {
        median(&self.metric(method, |r| r.aligned_eigs as f64))
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 { 0.5 * (v[mid - 1] + v[mid]) } else { v[mid] })
}

/// Runs every method on the same simulated instance for each seed.
///
/// The covariance comes from `seed_base`, each replicate's data, projections and noise
/// from `SeedStream::new(seed)`, so all methods see bitwise-identical measurements.
/// Without a model the diffusion method is skipped and a note records why.
pub fn run_comparison(
    scenario: &Scenario,
    eval: &EvalConfig,
    solver: &SolverConfig,
    objective: &ObjectiveConfig,
    ctx: Option<DiffusionContext<'_>>,
    seed_base: u64,
    threads: usize,
) -> Result<Comparison> {
    scenario.validate()?;
    eval.validate()?;
    let truth = scenario.truth(SeedStream::new(seed_base))?;
    let mut notes = Vec::new();
    let methods: Vec<Method> = eval
        .methods
        .iter()
        .copied()
        .filter(|&m| {
            let skip = m == Method::Diffusion && ctx.is_none();
            if skip {
                notes.push("diffusion skipped: no trained denoiser available".to_string());
            }
            !skip
        })
        .collect();
    let per_seed = parallel_map(eval.seeds.len(), threads, |i| -> Result<_> {
        let seed = eval.seeds[i];
        let inst = simulate(&truth, &scenario.sensing(&truth), scenario.n, SeedStream::new(seed))?;
        let problem = inst.problem(objective);
        let init = initial_estimate(&problem, solver.init)?;
        let mut rows = Vec::new();
        let mut ests = Vec::new();
        for &method in &methods {
            let cfg = SolverConfig { preconditioner: eval.settings.kind(method), ..*solver };
            let clock = Instant::now();
            let (est, trace) = pgd_run(&problem, &init, &cfg, ctx, SeedStream::new(seed).named("solver"))?;
            let millis = if solver.record_time { clock.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
            rows.push(EvalRow {
                method,
                seed,
                mse: mse(&est, &truth)?,
                rel_fro: rel_fro(&est, &truth)?,
                aligned_eigs: aligned_eigenvector_count(&est, &truth, eval.cos_threshold)?,
                iters: trace.iterations(),
                millis,
            });
            ests.push((method, est));
        }
        Ok((rows, ests))
    });
    let mut rows = Vec::new();
    let mut estimates = Vec::new();
    for r in per_seed {
        let (rs, es) = r?;
        rows.extend(rs);
        estimates.push(es);
    }
    Ok(Comparison { rows, estimates, truths: vec![truth; eval.seeds.len()], notes })
}

/// Value range mapped onto the color ramp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatScale {
    pub min: f64,
    pub max: f64,
}

impl HeatScale {
    /// Smallest range covering every entry of every matrix.
    pub fn covering<'a>(mats: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for m in mats {
            for &v in m.as_slice() {
                min = min.min(v);
                max = max.max(v);
            }
        }
        if min > max {
            (min, max) = (0.0, 0.0);
        }
        Self { min, max }
    }

    fn level(&self, v: f64) -> usize {
        if self.max <= self.min {
            return 0;
        }
        (((v - self.min) / (self.max - self.min) * RAMP_STEPS as f64).floor() as isize).clamp(0, RAMP_STEPS as isize - 1)
            as usize
    }
}

pub const RAMP_STEPS: usize = 64;

/// Step `i` of the color ramp, with `t = i/63`: `r = min(1, 3t)`, `g = clamp(3t − 1)`,
/// `b = clamp(3t − 2)`, each scaled to 0..255 and rounded.
pub fn ramp_color(i: usize) -> [u8; 3] {
    let t = i.min(RAMP_STEPS - 1) as f64 / (RAMP_STEPS - 1) as f64;
    let ch = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0 * t), ch(3.0 * t - 1.0), ch(3.0 * t - 2.0)]
}

const CELL: usize = 12;

/// SVG grid of `m` with a min/max annotation. Identical inputs give identical bytes.
pub fn heatmap_svg(m: &Matrix, scale: HeatScale, title: &str) -> Result<String> {
    if !m.is_finite() {
        return Err(Error::invalid("heat map of a non-finite matrix"));
    }
    let (rows, cols) = m.shape();
    let (w, h) = (cols * CELL, rows * CELL + 2 * CELL);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, "<title>{}</title>", escape(title)).unwrap();
    for i in 0..rows {
        for j in 0..cols {
            let [r, g, b] = ramp_color(scale.level(m[(i, j)]));
            writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="#{r:02x}{g:02x}{b:02x}"/>"##,
                j * CELL,
                i * CELL
            )
            .unwrap();
        }
    }
    writeln!(
        s,
        r#"<text x="2" y="{}" font-family="monospace" font-size="10">min={:e} max={:e}</text>"#,
        rows * CELL + CELL + CELL / 2,
        scale.min,
        scale.max
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn emit_heatmap(m: &Matrix, path: impl AsRef<Path>, scale: HeatScale, title: &str) -> Result<()> {
    std::fs::write(path, heatmap_svg(m, scale, title)?)?;
    Ok(())
}

/// Writes `{method}_seed{seed}_{estimate|abs_error}.svg` for every estimate,
/// with one shared scale per kind across the whole comparison. Returns the paths written.
pub fn emit_comparison_heatmaps(cmp: &Comparison, seeds: &[u64], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut est = Vec::new();
    let mut err = Vec::new();
    for (per_seed, truth) in cmp.estimates.iter().zip(&cmp.truths) {
        for (_, e) in per_seed {
            est.push(e.as_matrix().clone());
            err.push(e.sub(truth)?.map(f64::abs));
        }
    }
    let est_scale = HeatScale::covering(&est);
    let err_scale = HeatScale::covering(&err);
    let mut paths = Vec::new();
    let mut idx = 0;
    for (per_seed, &seed) in cmp.estimates.iter().zip(seeds) {
        for (method, _) in per_seed {
            for (kind, m, scale) in [("estimate", &est[idx], est_scale), ("abs_error", &err[idx], err_scale)] {
                let path = dir.join(format!("{}_seed{seed}_{kind}.svg", method.name()));
                emit_heatmap(m, &path, scale, &format!("{} {kind} seed {seed}", method.name()))?;
                paths.push(path);
            }
            idx += 1;
        }
    }
    Ok(paths)
}
