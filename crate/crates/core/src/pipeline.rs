//! End-to-end plumbing: simulated instances, gradient pools for calibration and training.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{make_partitions, sample_gaussian_data, synth_covariance, toeplitz, CovarianceSpec, DataMatrix, PartitionPlan};
use crate::denoiser::{TrainRecord, TrainingSet};
use crate::diffusion::{calibrate_schedule, robust_scale, DiffusionSchedule, NoiseLevel};
use crate::error::{Error, Result};
use crate::linalg::{project_psd, symmetrize, Matrix, SymMatrix};
use crate::objective::{gradient, gradient_error, reference_gradient, ObjectiveConfig};
use crate::optimizer::{initial_estimate, InitKind, Problem};
use crate::rng::{standard_normal, SeedStream};
use crate::sensing::{default_sigma_n, draw_projections, measure, MeasurementSet, ProjectionEnsemble, SensingConfig};

/// A synthetic estimation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub covariance: CovarianceSpec,
    pub l: usize,
    pub m: usize,
    pub p: usize,
    pub n: usize,
    /// `None` uses `0.01 · sqrt(trace(Σ)/l)`.
    pub sigma_n: Option<f64>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            covariance: CovarianceSpec::Toeplitz { rho: 0.9 },
            l: 32,
            m: 9,
            p: 256,
            n: 4096,
            sigma_n: None,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.covariance.validate(self.l)?;
        if self.p == 0 || self.n % self.p != 0 {
            return Err(Error::invalid(format!("partition count {} must divide n = {}", self.p, self.n)));
        }
        SensingConfig { l: self.l, m: self.m, p: self.p, sigma_n: self.sigma_n.unwrap_or(0.0) }.validate()
    }

    pub fn truth(&self, seed: SeedStream) -> Result<SymMatrix> {
        synth_covariance(&self.covariance, self.l, seed.named("covariance"))
    }

    pub fn sensing(&self, sigma_true: &SymMatrix) -> SensingConfig {
        SensingConfig {
            l: self.l,
            m: self.m,
            p: self.p,
            sigma_n: self.sigma_n.unwrap_or_else(|| default_sigma_n(sigma_true)),
        }
    }
}

/// One simulated problem together with everything needed to score and reference it.
#[derive(Debug, Clone)]
pub struct Instance {
    pub sigma_true: SymMatrix,
    pub plan: PartitionPlan,
    pub proj: ProjectionEnsemble,
    pub meas: MeasurementSet,
    /// Covariance of all samples before partitioning.
    pub full_cov: SymMatrix,
}

impl Instance {
    pub fn problem<'a>(&'a self, cfg: &'a ObjectiveConfig) -> Problem<'a> {
        Problem { meas: &self.meas, proj: &self.proj, cfg }
    }
}

/// Partitions, projects and measures `data`.
pub fn observe(
    data: &DataMatrix,
    sensing: &SensingConfig,
    seed: SeedStream,
) -> Result<(PartitionPlan, ProjectionEnsemble, MeasurementSet)> {
    sensing.validate()?;
    if data.bands() != sensing.l {
        return Err(Error::dim(format!("data has {} bands, sensing expects {}", data.bands(), sensing.l)));
    }
    let plan = make_partitions(data.samples(), sensing.p, seed.named("partitions"))?;
    let proj = draw_projections(sensing, seed.named("projections"))?;
    let meas = measure(data, &plan, &proj, sensing.sigma_n, seed.named("noise"))?;
    Ok((plan, proj, meas))
}

/// Samples `n` draws from `sigma_true` and observes them.
pub fn simulate(sigma_true: &SymMatrix, sensing: &SensingConfig, n: usize, seed: SeedStream) -> Result<Instance> {
    let data = sample_gaussian_data(sigma_true, n, seed.named("data"))?;
    let (plan, proj, meas) = observe(&data, sensing, seed)?;
    Ok(Instance { sigma_true: sigma_true.clone(), plan, proj, meas, full_cov: data.sample_covariance() })
}

/// Powers of two from 2 up to `p_max` that divide `n`.
pub fn divisor_levels(n: usize, p_max: usize) -> Vec<usize> {
    std::iter::successors(Some(2usize), |p| p.checked_mul(2))
        .take_while(|&p| p <= p_max.min(n))
        .filter(|p| n % p == 0)
        .collect()
}

/// Where the covariances behind a gradient pool come from.
#[derive(Debug, Clone, Copy)]
pub enum TruthSource<'a> {
    /// A fresh Toeplitz covariance per instance with `rho` uniform in the range, sampled `n` times.
    ToeplitzFamily { l: usize, rho_min: f64, rho_max: f64, n: usize },
    /// One observed data set with known covariance; instances re-partition and re-project it.
    Observed { data: &'a DataMatrix, truth: &'a SymMatrix },
}

impl TruthSource<'_> {
    fn samples(&self) -> usize {
        match self {
            TruthSource::ToeplitzFamily { n, .. } => *n,
            TruthSource::Observed { data, .. } => data.samples(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            TruthSource::ToeplitzFamily { l, .. } => *l,
            TruthSource::Observed { truth, .. } => truth.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSpec {
    /// Partition counts, one per diffusion step, increasing.
    pub levels: Vec<usize>,
    pub m: usize,
    pub instances: usize,
    pub iterates_per_instance: usize,
    /// Scale of the Wishart perturbation added to each iterate, relative to `trace(Σ)/l`.
    pub perturb: f64,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self { levels: divisor_levels(4096, 1024), m: 9, instances: 400, iterates_per_instance: 8, perturb: 0.05 }
    }
}

impl PoolSpec {
    pub fn validate(&self, source: &TruthSource<'_>) -> Result<()> {
        if self.levels.is_empty() || self.instances == 0 || self.iterates_per_instance == 0 {
            return Err(Error::invalid("pool needs levels, instances and iterates"));
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!("pool levels must increase: {:?}", self.levels)));
        }
        let n = source.samples();
        if let Some(p) = self.levels.iter().find(|&&p| p == 0 || n % p != 0) {
            return Err(Error::invalid(format!("pool level {p} does not divide n = {n}")));
        }
        if !(self.perturb >= 0.0) {
            return Err(Error::invalid("pool perturbation must be >= 0"));
        }
        if let TruthSource::ToeplitzFamily { rho_min, rho_max, .. } = *source {
            if !(rho_min <= rho_max && rho_min > -1.0 && rho_max < 1.0) {
                return Err(Error::invalid(format!("bad rho range [{rho_min}, {rho_max}]")));
            }
        }
        SensingConfig { l: source.dim(), m: self.m, p: self.levels[0], sigma_n: 0.0 }.validate()
    }
}

/// A clean gradient at some iterate and the partition error at level `level` (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub clean: SymMatrix,
    pub error: SymMatrix,
    pub level: usize,
}

/// `Σ* + t(μI − Σ*) + s·μ·W`, projected to the PSD cone, with `t = u³`, `s ~ U[0, perturb]`
/// and `W = GGᵀ/d − I` for an `l × d` standard normal `G`, `d = ⌈5l/4⌉`.
fn training_iterate(truth: &SymMatrix, mu: f64, perturb: f64, rng: &mut crate::rng::Rng) -> Result<SymMatrix> {
    let l = truth.dim();
    let t = rng.gen::<f64>().powi(3);
    let s = rng.gen::<f64>() * perturb;
    let d = (5 * l).div_ceil(4);
    let g = Matrix::from_fn(l, d, |_, _| standard_normal(rng));
    let mut w = g.matmul_t(&g)?.scaled(1.0 / d as f64);
    for i in 0..l {
        w[(i, i)] -= 1.0;
    }
    let mut x = truth.as_matrix().scaled(1.0 - t);
    for i in 0..l {
        x[(i, i)] += t * mu;
    }
    x.axpy(s * mu, &w);
    project_psd(&symmetrize(&x)?)
}

fn pool_instance(
    source: &TruthSource<'_>,
    spec: &PoolSpec,
    cfg: &ObjectiveConfig,
    i: usize,
    seed: SeedStream,
) -> Result<Vec<PoolEntry>> {
    let level = i % spec.levels.len();
    let seed = seed.child(i as u64);
    let mut rng = seed.named("iterates").rng();
    let owned;
    let (truth, data) = match *source {
        TruthSource::ToeplitzFamily { l, rho_min, rho_max, n } => {
            let rho = rho_min + (rho_max - rho_min) * rng.gen::<f64>();
            let truth = toeplitz(l, rho);
            owned = sample_gaussian_data(&truth, n, seed.named("data"))?;
            (truth, &owned)
        }
        TruthSource::Observed { data, truth } => (truth.clone(), data),
    };
    let sensing =
        SensingConfig { l: truth.dim(), m: spec.m, p: spec.levels[level], sigma_n: default_sigma_n(&truth) };
    let (_, proj, meas) = observe(data, &sensing, seed)?;
    let full = data.sample_covariance();
    let noisy = gradient(&truth, &meas, &proj, cfg)?;
    let clean_at_truth = reference_gradient(&truth, &full, &proj, sensing.sigma_n, cfg)?;
    let error = gradient_error(&noisy, &clean_at_truth)?;
    let mu = initial_estimate(&Problem { meas: &meas, proj: &proj, cfg }, InitKind::ScaledIdentity)?[(0, 0)];
    (0..spec.iterates_per_instance)
        .map(|_| {
            let it = training_iterate(&truth, mu, spec.perturb, &mut rng)?;
            let clean = reference_gradient(&it, &full, &proj, sensing.sigma_n, cfg)?.grad;
            Ok(PoolEntry { clean, error: error.clone(), level })
        })
        .collect()
}

/// Runs `f(0..n)` on up to `threads` workers; output order is index order.
pub(crate) fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (c, part) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in part.iter_mut().enumerate() {
                    *slot = Some(f(c * chunk + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("filled by worker")).collect()
}

/// Pairs of clean gradients and partition errors. Instance `i` uses level `i mod T`
/// and contributes `iterates_per_instance` entries sharing one error.
pub fn gradient_pool(
    source: &TruthSource<'_>,
    spec: &PoolSpec,
    cfg: &ObjectiveConfig,
    seed: SeedStream,
    threads: usize,
) -> Result<Vec<PoolEntry>> {
    spec.validate(source)?;
    let parts = parallel_map(spec.instances, threads, |i| pool_instance(source, spec, cfg, i, seed));
    let mut out = Vec::with_capacity(spec.instances * spec.iterates_per_instance);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Entrywise standard deviation of the pooled errors at each level.
pub fn noise_levels(pool: &[PoolEntry], levels: &[usize]) -> Result<Vec<NoiseLevel>> {
    levels
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let vals: Vec<f64> = pool
                .iter()
                .filter(|e| e.level == k)
                .flat_map(|e| e.error.as_slice().iter().copied())
                .collect();
            if vals.len() < 2 {
                return Err(Error::Calibration(format!("no error samples at level p={p}")));
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            Ok(NoiseLevel { partitions: p, std: var.sqrt() })
        })
        .collect()
}

/// Schedule whose step `k` matches the measured error level `k`, scaled by the clean-gradient scale.
pub fn calibrate_from_pool(pool: &[PoolEntry], levels: &[usize]) -> Result<DiffusionSchedule> {
    let cleans: Vec<SymMatrix> = pool.iter().map(|e| e.clean.clone()).collect();
    let c = robust_scale(&cleans)?;
    calibrate_schedule(&noise_levels(pool, levels)?, c)
}

/// Normalizes the pool into diffusion training records: `x0 = clean/c`, `ε = error/(c·r_k)`
/// with `r_k = √((1−ᾱ_k)/ᾱ_k)`, so that `x_k` equals `√ᾱ_k·(clean + error)/c`.
pub fn training_set(pool: &[PoolEntry], schedule: &DiffusionSchedule) -> Result<TrainingSet> {
    let c = schedule.scale_c();
    let records = pool
        .iter()
        .map(|e| {
            let k = e.level + 1;
            if k > schedule.steps() {
                return Err(Error::dim(format!("pool level {k} beyond schedule length {}", schedule.steps())));
            }
            Ok(TrainRecord { x0: e.clean.scaled(1.0 / c), eps: e.error.scaled(1.0 / (c * schedule.noise_ratio(k))), k })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet { records })
}
