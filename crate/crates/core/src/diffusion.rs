//! Variance schedules, the forward noising chain over symmetric matrices, and the reverse sampler.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Matrix, SymMatrix};
use crate::rng::{standard_normal, Rng, SeedStream};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    partition_of_step: Vec<usize>,
    scale_c: f64,
}

impl DiffusionSchedule {
    /// Builds a schedule from `β`; `partition_of_step[k-1]` is the partition count of step `k`.
    pub fn from_betas(beta: Vec<f64>, partition_of_step: Vec<usize>, scale_c: f64) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("β must lie in (0, 1), got {b}")));
        }
        if partition_of_step.len() != beta.len() {
            return Err(Error::dim(format!(
                "{} steps but {} partition counts",
                beta.len(),
                partition_of_step.len()
            )));
        }
        if partition_of_step.windows(2).any(|w| w[1] < w[0]) || partition_of_step.contains(&0) {
            return Err(Error::invalid("partition counts must be positive and nondecreasing"));
        }
        if !(scale_c > 0.0) || !scale_c.is_finite() {
            return Err(Error::invalid(format!("scale c must be positive, got {scale_c}")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::invalid("cumulative signal retention is not strictly decreasing"));
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
            partition_of_step,
            scale_c,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    // Accessors are 1-based in the step index k.

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k - 1]
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigma[k - 1]
    }

    pub fn partitions_at(&self, k: usize) -> usize {
        self.partition_of_step[k - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn partition_of_step(&self) -> &[usize] {
        &self.partition_of_step
    }

    pub fn scale_c(&self) -> f64 {
        self.scale_c
    }

    /// `√((1 − ᾱ_k) / ᾱ_k)`: noise-to-signal ratio of step `k` in normalized units.
    pub fn noise_ratio(&self, k: usize) -> f64 {
        let ab = self.alpha_bar(k);
        ((1.0 - ab) / ab).sqrt()
    }

    /// Largest step whose partition count does not exceed `p`, if any.
    pub fn step_for_partitions(&self, p: usize) -> Option<usize> {
        self.partition_of_step.iter().rposition(|&q| q <= p).map(|i| i + 1)
    }

    pub fn to_json(&self) -> String {
        let file = ScheduleFile {
            t: self.steps(),
            beta: self.beta.clone(),
            scale_c: self.scale_c,
            partition_of_step: self.partition_of_step.clone(),
            alpha: Some(self.alpha.clone()),
            alpha_bar: Some(self.alpha_bar.clone()),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("schedule serializes");
        s.push('\n');
        s
    }

    /// Parses schedule JSON, recomputing α and ᾱ and checking them against any stored copies.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScheduleFile =
            serde_json::from_str(text).map_err(|e| Error::format(format!("schedule: {e}")))?;
        if file.t != file.beta.len() {
            return Err(Error::format(format!(
                "schedule declares T={} but lists {} betas",
                file.t,
                file.beta.len()
            )));
        }
        let s = Self::from_betas(file.beta, file.partition_of_step, file.scale_c)
            .map_err(|e| Error::format(format!("schedule: {e}")))?;
        for (name, stored, fresh) in [
            ("alpha", &file.alpha, &s.alpha),
            ("alpha_bar", &file.alpha_bar, &s.alpha_bar),
        ] {
            if let Some(stored) = stored {
                let ok = stored.len() == fresh.len()
                    && stored.iter().zip(fresh).all(|(a, b)| (a - b).abs() <= 1e-15 * b.abs().max(1e-300));
                if !ok {
                    return Err(Error::format(format!("stored {name} disagrees with recomputed values")));
                }
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScheduleFile {
    #[serde(rename = "T")]
    t: usize,
    beta: Vec<f64>,
    scale_c: f64,
    partition_of_step: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha_bar: Option<Vec<f64>>,
}

/// `T` partition counts on a geometric grid from 2 to `p_max`, rounded and nondecreasing.
pub fn geometric_partition_grid(t: usize, p_max: usize) -> Vec<usize> {
    if t == 1 {
        return vec![p_max];
    }
    let ratio = (p_max as f64 / 2.0).ln() / (t - 1) as f64;
    let mut out: Vec<usize> = (0..t)
        .map(|i| (2.0 * (ratio * i as f64).exp()).round() as usize)
        .collect();
    out[t - 1] = p_max;
    for i in 1..t {
        out[i] = out[i].max(out[i - 1]);
    }
    out
}

pub const DEFAULT_P_MAX: usize = 1024;

/// Linear β from `beta_start` to `beta_end`, with the default partition grid and unit scale.
pub fn build_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta = (0..t)
        .map(|i| {
            if t == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    DiffusionSchedule::from_betas(beta, geometric_partition_grid(t, DEFAULT_P_MAX.max(2)), 1.0)
}

/// Measured gradient-error standard deviation at one partition level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub partitions: usize,
    pub std: f64,
}

/// Chooses `ᾱ_k = 1 / (1 + (std_k / c)²)` so that `c·√((1−ᾱ_k)/ᾱ_k)` equals the measured std at level `k`.
///
/// Adjacent equal stds would need `β_k = 0`, so stds must increase strictly.
pub fn calibrate_schedule(stats: &[NoiseLevel], scale_c: f64) -> Result<DiffusionSchedule> {
    if stats.is_empty() {
        return Err(Error::Calibration("no noise statistics supplied".into()));
    }
    if let Some(s) = stats.iter().find(|s| !(s.std > 0.0) || !s.std.is_finite()) {
        return Err(Error::Calibration(format!(
            "noise std at p={} is not positive: {}",
            s.partitions, s.std
        )));
    }
    for w in stats.windows(2) {
        if w[1].partitions <= w[0].partitions {
            return Err(Error::Calibration(format!(
                "partition levels must increase, got {} then {}",
                w[0].partitions, w[1].partitions
            )));
        }
        if w[1].std <= w[0].std {
            return Err(Error::Calibration(format!(
                "noise std is not increasing with p: {:.6e} at p={} vs {:.6e} at p={}",
                w[0].std, w[0].partitions, w[1].std, w[1].partitions
            )));
        }
    }
    if !(scale_c > 0.0) {
        return Err(Error::Calibration(format!("scale c must be positive, got {scale_c}")));
    }
    let alpha_bar: Vec<f64> = stats
        .iter()
        .map(|s| 1.0 / (1.0 + (s.std / scale_c).powi(2)))
        .collect();
    let beta = alpha_bar
        .iter()
        .enumerate()
        .map(|(i, &ab)| if i == 0 { 1.0 - ab } else { 1.0 - ab / alpha_bar[i - 1] })
        .collect();
    DiffusionSchedule::from_betas(beta, stats.iter().map(|s| s.partitions).collect(), scale_c)
        .map_err(|e| Error::Calibration(e.to_string()))
}

/// `median|entry| · 1.4826 · l` over the pooled entries of `grads`.
pub fn robust_scale(grads: &[SymMatrix]) -> Result<f64> {
    let l = grads
        .first()
        .ok_or_else(|| Error::invalid("no gradients to take a scale from"))?
        .dim();
    let mut abs: Vec<f64> = grads.iter().flat_map(|g| g.as_slice().iter().map(|v| v.abs())).collect();
    abs.sort_by(f64::total_cmp);
    let mid = abs.len() / 2;
    let median = if abs.len() % 2 == 0 { 0.5 * (abs[mid - 1] + abs[mid]) } else { abs[mid] };
    let c = median * 1.4826 * l as f64;
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Calibration(format!("degenerate gradient scale {c}")));
    }
    Ok(c)
}

/// Symmetric noise with unit entry variance: `G_ii` on the diagonal and
/// `(G_ij + G_ji)/√2` off it, for i.i.d. standard normal `G`.
pub fn symmetric_noise(l: usize, rng: &mut Rng) -> SymMatrix {
    let mut m = Matrix::zeros(l, l);
    for i in 0..l {
        m[(i, i)] = standard_normal(rng);
        for j in (i + 1)..l {
            let v = (standard_normal(rng) + standard_normal(rng)) * std::f64::consts::FRAC_1_SQRT_2;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    SymMatrix::from_symmetric_unchecked(m)
}

/// A gradient in normalized units, tagged with its chain step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyGradient {
    pub value: SymMatrix,
    pub step: usize,
    pub scale: f64,
}

fn lincomb(a: f64, x: &SymMatrix, b: f64, y: &SymMatrix) -> SymMatrix {
    let m = x.as_matrix().zip_map(y, |u, v| a * u + b * v).expect("same shape");
    SymMatrix::from_symmetric_unchecked(m)
}

/// One forward transition `x_k = √(1−β_k)·x_{k−1} + √β_k·ε`.
pub fn forward_step(x_prev: &NoisyGradient, k: usize, schedule: &DiffusionSchedule, seed: SeedStream) -> Result<NoisyGradient> {
    if k == 0 || k > schedule.steps() {
        return Err(Error::invalid(format!("step {k} outside 1..={}", schedule.steps())));
    }
    if x_prev.step != k - 1 {
        return Err(Error::Contract(format!(
            "forward step {k} needs an input at step {}, got step {}",
            k - 1,
            x_prev.step
        )));
    }
    let eps = symmetric_noise(x_prev.value.dim(), &mut seed.rng());
    let b = schedule.beta(k);
    Ok(NoisyGradient {
        value: lincomb((1.0 - b).sqrt(), &x_prev.value, b.sqrt(), &eps),
        step: k,
        scale: x_prev.scale,
    })
}

/// Closed-form marginal `x_k = √ᾱ_k·x_0 + √(1−ᾱ_k)·ε`. Returns the sample and the noise used.
pub fn forward_marginal(
    x0: &NoisyGradient,
    k: usize,
    schedule: &DiffusionSchedule,
    seed: SeedStream,
) -> Result<(NoisyGradient, SymMatrix)> {
    if x0.step != 0 {
        return Err(Error::Contract(format!("marginal needs a step-0 input, got step {}", x0.step)));
    }
    if k == 0 || k > schedule.steps() {
        return Err(Error::invalid(format!("step {k} outside 1..={}", schedule.steps())));
    }
    let eps = symmetric_noise(x0.value.dim(), &mut seed.rng());
    let ab = schedule.alpha_bar(k);
    let value = lincomb(ab.sqrt(), &x0.value, (1.0 - ab).sqrt(), &eps);
    Ok((NoisyGradient { value, step: k, scale: x0.scale }, eps))
}

/// Noise predictor `ε_θ(x_k, k)`.
pub trait EpsModel {
    fn predict(&self, x: &SymMatrix, k: usize) -> Result<SymMatrix>;
}

impl<F> EpsModel for F
where
    F: Fn(&SymMatrix, usize) -> Result<SymMatrix>,
{
    fn predict(&self, x: &SymMatrix, k: usize) -> Result<SymMatrix> {
        self(x, k)
    }
}

/// Predicts zero noise.
pub struct ZeroEps;

impl EpsModel for ZeroEps {
    fn predict(&self, x: &SymMatrix, _k: usize) -> Result<SymMatrix> {
        Ok(SymMatrix::zeros(x.dim()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseOptions {
    /// Multiplies every `σ_k`; 0 gives the deterministic chain.
    pub sigma_scale: f64,
    /// Keep every intermediate iterate (for inspection and tests).
    pub keep_path: bool,
}

impl Default for ReverseOptions {
    fn default() -> Self {
        Self { sigma_scale: 1.0, keep_path: false }
    }
}

/// Result of a reverse chain; `path[j]` is the iterate after the step from `start - j`.
#[derive(Debug, Clone)]
pub struct ReverseOutput {
    pub x0: NoisyGradient,
    pub path: Vec<SymMatrix>,
}

/// Runs `x_{k−1} = (x_k − β_k/√(1−ᾱ_k)·ε_θ(x_k, k))/√α_k + σ_k z` from `x_t.step` down to 0,
/// with `z = 0` at `k = 1`. Step `k` draws `z` from child stream `k` of `seed`.
pub fn reverse_sample(
    x_t: &NoisyGradient,
    schedule: &DiffusionSchedule,
    model: &dyn EpsModel,
    seed: SeedStream,
    opts: ReverseOptions,
) -> Result<ReverseOutput> {
    if x_t.step == 0 || x_t.step > schedule.steps() {
        return Err(Error::invalid(format!(
            "reverse chain must start in 1..={}, got {}",
            schedule.steps(),
            x_t.step
        )));
    }
    let l = x_t.value.dim();
    let mut x = x_t.value.clone();
    let mut path = Vec::new();
    for k in (1..=x_t.step).rev() {
        let eps = model.predict(&x, k)?;
        if eps.dim() != l {
            return Err(Error::dim(format!("noise model returned {0}x{0} for a {l}x{l} input", eps.dim())));
        }
        let coef = schedule.beta(k) / (1.0 - schedule.alpha_bar(k)).sqrt();
        let inv = 1.0 / schedule.alpha(k).sqrt();
        let mut next = x.as_matrix().zip_map(&eps, |a, e| (a - coef * e) * inv)?;
        let s = opts.sigma_scale * schedule.sigma(k);
        if k > 1 && s > 0.0 {
            let z = symmetric_noise(l, &mut seed.child(k as u64).rng());
            next.axpy(s, &z);
        }
        x = symmetrize(&next)?;
        if !x.is_finite() {
            return Err(Error::Numerical {
                message: format!("reverse chain produced non-finite values at step {k}"),
                residual: f64::NAN,
            });
        }
        if opts.keep_path {
            path.push(x.clone());
        }
    }
    Ok(ReverseOutput {
        x0: NoisyGradient { value: x, step: 0, scale: x_t.scale },
        path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_arithmetic() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        let one = build_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(one.alpha_bar(1), 0.5);
        assert_eq!(one.partitions_at(1), DEFAULT_P_MAX);
    }

    #[test]
    fn default_schedule_matches_direct_product() {
        let s = build_schedule(64, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for k in 1..=64 {
            let beta = 1e-4 + (0.02 - 1e-4) * (k - 1) as f64 / 63.0;
            prod *= 1.0 - beta;
            assert!((s.alpha_bar(k) - prod).abs() <= 1e-15 * prod);
            assert_eq!(s.alpha(k), 1.0 - s.beta(k));
            assert!((s.sigma(k) * s.sigma(k) - s.beta(k)).abs() <= 1e-15 * s.beta(k));
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.partitions_at(64), DEFAULT_P_MAX);
        assert_eq!(s.partitions_at(1), 2);
    }

    #[test]
    fn range_violations() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(4, 0.0, 0.2).is_err());
        assert!(build_schedule(4, 0.3, 0.2).is_err());
        assert!(build_schedule(4, 0.1, 1.0).is_err());
    }

    #[test]
    fn partition_grid() {
        assert_eq!(geometric_partition_grid(10, 1024), vec![2, 4, 8, 16, 32, 64, 128, 256, 512, 1024]);
        let g = geometric_partition_grid(64, 1024);
        assert!(g.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!((g[0], g[63]), (2, 1024));
    }

    #[test]
    fn calibration_inverts_noise_ratio() {
        let stats: Vec<NoiseLevel> = [2usize, 4, 8, 16, 32]
            .iter()
            .map(|&p| NoiseLevel { partitions: p, std: 0.3 * (p as f64).sqrt() })
            .collect();
        let s = calibrate_schedule(&stats, 2.0).unwrap();
        for (k, st) in stats.iter().enumerate() {
            assert!((s.noise_ratio(k + 1) * 2.0 / st.std - 1.0).abs() < 1e-12);
        }
        let single = calibrate_schedule(&stats[..1], 2.0).unwrap();
        assert_eq!(single.steps(), 1);
        assert!((single.noise_ratio(1) * 2.0 - stats[0].std).abs() < 1e-12);

        let mut bad = stats.clone();
        bad[2].std = bad[1].std * 0.9;
        assert!(matches!(calibrate_schedule(&bad, 2.0), Err(Error::Calibration(_))));
    }

    #[test]
    fn step_lookup() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2, 0.3], vec![2, 8, 32], 1.0).unwrap();
        assert_eq!(s.step_for_partitions(8), Some(2));
        assert_eq!(s.step_for_partitions(31), Some(2));
        assert_eq!(s.step_for_partitions(1000), Some(3));
        assert_eq!(s.step_for_partitions(1), None);
    }

    #[test]
    fn json_round_trip_and_verification() {
        let s = calibrate_schedule(
            &[NoiseLevel { partitions: 4, std: 0.5 }, NoiseLevel { partitions: 16, std: 1.5 }],
            1.3,
        )
        .unwrap();
        let text = s.to_json();
        let back = DiffusionSchedule::from_json(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_json(), text);
        let tampered = text.replacen("\"T\": 2", "\"T\": 3", 1);
        assert!(matches!(DiffusionSchedule::from_json(&tampered), Err(Error::Format(_))));
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["alpha_bar"][1] = serde_json::json!(0.5);
        assert!(DiffusionSchedule::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn symmetric_noise_has_unit_entry_variance() {
        let mut rng = SeedStream::new(3).rng();
        let (mut diag, mut off) = (0.0, 0.0);
        let trials = 2000;
        for _ in 0..trials {
            let e = symmetric_noise(4, &mut rng);
            assert_eq!(e.max_asymmetry(), 0.0);
            diag += e[(1, 1)] * e[(1, 1)];
            off += e[(0, 3)] * e[(0, 3)];
        }
        assert!((diag / trials as f64 - 1.0).abs() < 0.1);
        assert!((off / trials as f64 - 1.0).abs() < 0.1);
    }

    #[test]
    fn zero_model_rescales() {
        let s = build_schedule(8, 0.01, 0.1).unwrap();
        let x = NoisyGradient { value: crate::data::toeplitz(4, 0.5), step: 8, scale: 1.0 };
        let out = reverse_sample(&x, &s, &ZeroEps, SeedStream::new(0), ReverseOptions { sigma_scale: 0.0, keep_path: true }).unwrap();
        let expected = x.value.scaled(1.0 / s.alpha_bar(8).sqrt());
        assert!(out.x0.value.sub(&expected).unwrap().max_abs() < 1e-12);
        assert_eq!(out.path.len(), 8);
    }

    #[test]
    fn step_contracts() {
        let s = build_schedule(4, 0.01, 0.1).unwrap();
        let x = NoisyGradient { value: SymMatrix::zeros(4), step: 2, scale: 1.0 };
        assert!(matches!(forward_step(&x, 2, &s, SeedStream::new(0)), Err(Error::Contract(_))));
        assert!(forward_marginal(&x, 1, &s, SeedStream::new(0)).is_err());
        assert!(reverse_sample(&NoisyGradient { step: 5, ..x }, &s, &ZeroEps, SeedStream::new(0), ReverseOptions::default()).is_err());
    }
}
