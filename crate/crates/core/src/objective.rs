//! Multi-partition least-squares objective, its gradient, and gradient-error bookkeeping.
//!
//! For partitions `i = 1..p` with projections `P_i` (l×m) and compressed covariances `S̃_i`,
//!
//! ```text
//! f(Σ)  = Σᵢ ‖S̃_i − P_iᵀ Σ P_i‖_F² + τ ψ(Σ)
//! ∇f(Σ) = Σᵢ −2 P_i (S̃_i − P_iᵀ Σ P_i) P_iᵀ + τ ∇ψ(Σ)
//! ```
//!
//! Partition sums run in a fixed order, so results do not depend on scheduling.

use serde::{Deserialize, Serialize};

use crate::data::{DataMatrix, PartitionPlan};
use crate::error::{Error, Result};
use crate::linalg::{gemm, symmetrize, Matrix, SymMatrix};
use crate::rng::SeedStream;
use crate::sensing::{compressed_sample_cov, measure_partition, MeasurementSet, ProjectionEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    /// `ψ(Σ) = ‖Σ‖_F²`.
    FrobeniusRidge,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub tau: f64,
    pub psi: Regularizer,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("tau must be >= 0, got {}", self.tau)));
        }
        Ok(())
    }

    fn penalty(&self, sigma: &SymMatrix) -> f64 {
        match self.psi {
            Regularizer::None => 0.0,
            Regularizer::FrobeniusRidge => self.tau * sigma.dot(sigma),
        }
    }

    fn add_penalty_gradient(&self, sigma: &SymMatrix, g: &mut Matrix) {
        if let Regularizer::FrobeniusRidge = self.psi {
            g.axpy(2.0 * self.tau, sigma);
        }
    }
}

/// Identifies the Σ a gradient was evaluated at, so that gradients from
/// different iterates are never subtracted from each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Provenance(u64);

impl Provenance {
    pub fn of(sigma: &SymMatrix) -> Self {
        let h = sigma
            .as_slice()
            .iter()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x100_0000_01B3));
        Self(h ^ sigma.dim() as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub grad: SymMatrix,
    pub partition_count: usize,
    pub clean_ref: Option<SymMatrix>,
    pub error_ref: Option<SymMatrix>,
    pub provenance: Provenance,
}

impl GradientSample {
    fn new(grad: SymMatrix, partition_count: usize, sigma: &SymMatrix) -> Self {
        Self {
            grad,
            partition_count,
            clean_ref: None,
            error_ref: None,
            provenance: Provenance::of(sigma),
        }
    }

    /// Attaches `clean` and the measured error `self − clean`.
    pub fn with_reference(mut self, clean: &GradientSample) -> Result<Self> {
        let err = gradient_error(&self, clean)?;
        self.clean_ref = Some(clean.grad.clone());
        self.error_ref = Some(err);
        Ok(self)
    }
}

fn check_problem(sigma: &SymMatrix, s_tilde: &[SymMatrix], proj: &ProjectionEnsemble) -> Result<()> {
    if s_tilde.len() != proj.partitions() {
        return Err(Error::dim(format!(
            "{} measurement blocks but {} projections",
            s_tilde.len(),
            proj.partitions()
        )));
    }
    if sigma.dim() != proj.ambient_dim() {
        return Err(Error::dim(format!(
            "Σ is {0}x{0} but projections have {1} rows",
            sigma.dim(),
            proj.ambient_dim()
        )));
    }
    if let Some(s) = s_tilde.iter().find(|s| s.dim() != proj.compressed_dim()) {
        return Err(Error::dim(format!(
            "compressed covariance is {0}x{0} but projections have {1} columns",
            s.dim(),
            proj.compressed_dim()
        )));
    }
    Ok(())
}

/// `S̃_i − P_iᵀ Σ P_i`.
fn residual(sigma: &SymMatrix, s_tilde: &SymMatrix, p: &Matrix) -> Matrix {
    let (l, m) = p.shape();
    let mut sp = Matrix::zeros(l, m);
    gemm(1.0, sigma, false, p, false, 0.0, &mut sp);
    let mut r = s_tilde.as_matrix().clone();
    gemm(-1.0, p, true, &sp, false, 1.0, &mut r);
    r
}

/// `acc += -2 · P r Pᵀ`.
fn accumulate_backprojection(acc: &mut Matrix, p: &Matrix, r: &Matrix) {
    let mut pr = Matrix::zeros(p.rows(), p.cols());
    gemm(1.0, p, false, r, false, 0.0, &mut pr);
    gemm(-2.0, &pr, false, p, true, 1.0, acc);
}

fn value_for(sigma: &SymMatrix, s_tilde: &[SymMatrix], proj: &ProjectionEnsemble, cfg: &ObjectiveConfig) -> Result<f64> {
    check_problem(sigma, s_tilde, proj)?;
    let data: f64 = s_tilde
        .iter()
        .zip(proj.matrices())
        .map(|(s, p)| {
            let r = residual(sigma, s, p);
            r.dot(&r)
        })
        .sum();
    Ok(data + cfg.penalty(sigma))
}

fn gradient_for(sigma: &SymMatrix, s_tilde: &[SymMatrix], proj: &ProjectionEnsemble, cfg: &ObjectiveConfig) -> Result<SymMatrix> {
    check_problem(sigma, s_tilde, proj)?;
    let l = sigma.dim();
    let mut g = Matrix::zeros(l, l);
    for (s, p) in s_tilde.iter().zip(proj.matrices()) {
        accumulate_backprojection(&mut g, p, &residual(sigma, s, p));
    }
    cfg.add_penalty_gradient(sigma, &mut g);
    symmetrize(&g)
}

pub fn objective_value(
    sigma: &SymMatrix,
    meas: &MeasurementSet,
    proj: &ProjectionEnsemble,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    value_for(sigma, &meas.s_tilde, proj, cfg)
}

pub fn gradient(
    sigma: &SymMatrix,
    meas: &MeasurementSet,
    proj: &ProjectionEnsemble,
    cfg: &ObjectiveConfig,
) -> Result<GradientSample> {
    let g = gradient_for(sigma, &meas.s_tilde, proj, cfg)?;
    Ok(GradientSample::new(g, proj.partitions(), sigma))
}

/// Gradient of the single-projection objective whose compressed covariance uses all `n` samples.
pub fn clean_gradient(
    sigma: &SymMatrix,
    full_data: &DataMatrix,
    single_proj: &ProjectionEnsemble,
    sigma_n: f64,
    cfg: &ObjectiveConfig,
    seed: SeedStream,
) -> Result<GradientSample> {
    if single_proj.partitions() != 1 {
        return Err(Error::Contract(format!(
            "clean gradient needs exactly one projection, got {}",
            single_proj.partitions()
        )));
    }
    let y = measure_partition(full_data.as_matrix(), single_proj.get(0), sigma_n, seed)?;
    let s_tilde = [compressed_sample_cov(&y)?];
    let g = gradient_for(sigma, &s_tilde, single_proj, cfg)?;
    Ok(GradientSample::new(g, 1, sigma))
}

/// Clean reference on the partitioned problem's own projections: every `S̃_i`
/// is replaced by its full-data counterpart `P_iᵀ S P_i + σ_N² I`, where `S`
/// is the covariance of all `n` samples.
///
/// The difference to the partitioned gradient is then
/// `−2 Σᵢ P_i (S̃_i − P_iᵀ S P_i − σ_N² I) P_iᵀ`, which does not depend on Σ.
pub fn reference_gradient(
    sigma: &SymMatrix,
    full_cov: &SymMatrix,
    proj: &ProjectionEnsemble,
    sigma_n: f64,
    cfg: &ObjectiveConfig,
) -> Result<GradientSample> {
    let m = proj.compressed_dim();
    let s_tilde = proj
        .matrices()
        .iter()
        .map(|p| {
            let mut r = residual(full_cov, &SymMatrix::zeros(m), p).scaled(-1.0);
            for j in 0..m {
                r[(j, j)] += sigma_n * sigma_n;
            }
            symmetrize(&r)
        })
        .collect::<Result<Vec<_>>>()?;
    let g = gradient_for(sigma, &s_tilde, proj, cfg)?;
    Ok(GradientSample::new(g, proj.partitions(), sigma))
}

/// `grad_p − grad_clean`; both must have been evaluated at the same Σ.
pub fn gradient_error(grad_p: &GradientSample, grad_clean: &GradientSample) -> Result<SymMatrix> {
    if grad_p.provenance != grad_clean.provenance {
        return Err(Error::Contract(
            "gradients were evaluated at different Σ and cannot be differenced".into(),
        ));
    }
    grad_p.grad.sub(&grad_clean.grad)
}

/// Diagnostic form of the error with `R_i = S_i − S`:
/// `−2 Σᵢ P_i P_iᵀ (S_i − S) P_i P_iᵀ`, where `S_i` is partition `i`'s sample
/// covariance and `S` the covariance of all samples. Sensing noise is not included.
pub fn analytic_error(data: &DataMatrix, plan: &PartitionPlan, proj: &ProjectionEnsemble) -> Result<SymMatrix> {
    if plan.partitions() != proj.partitions() {
        return Err(Error::dim(format!(
            "{} partitions but {} projections",
            plan.partitions(),
            proj.partitions()
        )));
    }
    let full = data.sample_covariance();
    let l = full.dim();
    let mut g = Matrix::zeros(l, l);
    for (idx, p) in plan.index_sets.iter().zip(proj.matrices()) {
        let si = DataMatrix::new(data.block(idx))?.sample_covariance();
        let dev = si.sub(&full)?;
        // Pᵀ (S_i − S) P is the m×m residual of the partitioned minus the clean fit.
        let r = residual(&dev, &SymMatrix::zeros(p.cols()), p).scaled(-1.0);
        accumulate_backprojection(&mut g, p, &r);
    }
    symmetrize(&g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_partitions, sample_gaussian_data, toeplitz};
    use crate::sensing::{draw_projections, measure, SensingConfig};

    fn identity_ensemble(l: usize) -> ProjectionEnsemble {
        ProjectionEnsemble::new(vec![Matrix::identity(l)]).unwrap()
    }

    #[test]
    fn exact_fit_is_zero() {
        let sigma = toeplitz(6, 0.5);
        let cfg = SensingConfig { l: 6, m: 3, p: 4, sigma_n: 0.0 };
        let proj = draw_projections(&cfg, SeedStream::new(1)).unwrap();
        let s_tilde = proj
            .matrices()
            .iter()
            .map(|p| symmetrize(&p.t_matmul(&sigma.matmul(p).unwrap()).unwrap()).unwrap())
            .collect();
        let meas = MeasurementSet { s_tilde, block_size: 1, sigma_n: 0.0 };
        let f = objective_value(&sigma, &meas, &proj, &ObjectiveConfig::default()).unwrap();
        assert!(f < 1e-24);
        let ridge = ObjectiveConfig { tau: 0.3, psi: Regularizer::FrobeniusRidge };
        let g = gradient(&sigma, &meas, &proj, &ridge).unwrap();
        let expected = sigma.scaled(0.6);
        assert!(g.grad.sub(&expected).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn ridge_penalty_on_identity() {
        let proj = identity_ensemble(2);
        let meas = MeasurementSet { s_tilde: vec![SymMatrix::identity(2)], block_size: 1, sigma_n: 0.0 };
        let cfg = ObjectiveConfig { tau: 1.0, psi: Regularizer::FrobeniusRidge };
        assert_eq!(objective_value(&SymMatrix::identity(2), &meas, &proj, &cfg).unwrap(), 2.0);
    }

    #[test]
    fn identity_projection_gradient() {
        let s = toeplitz(4, 0.3);
        let sigma = toeplitz(4, 0.7);
        let meas = MeasurementSet { s_tilde: vec![s.clone()], block_size: 1, sigma_n: 0.0 };
        let g = gradient(&sigma, &meas, &identity_ensemble(4), &ObjectiveConfig::default()).unwrap();
        let expected = s.sub(&sigma).unwrap().scaled(-2.0);
        assert!(g.grad.sub(&expected).unwrap().max_abs() < 1e-14);
        assert_eq!(g.grad.max_asymmetry(), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let meas = MeasurementSet { s_tilde: vec![SymMatrix::identity(3)], block_size: 1, sigma_n: 0.0 };
        let r = objective_value(&SymMatrix::identity(4), &meas, &identity_ensemble(4), &ObjectiveConfig::default());
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    fn instance(seed: u64, p: usize) -> (DataMatrix, PartitionPlan, ProjectionEnsemble, MeasurementSet) {
        let s = SeedStream::new(seed);
        let x = sample_gaussian_data(&toeplitz(8, 0.8), 64, s.child(0)).unwrap();
        let plan = make_partitions(64, p, s.child(1)).unwrap();
        let proj = draw_projections(&SensingConfig { l: 8, m: 3, p, sigma_n: 0.0 }, s.child(2)).unwrap();
        let meas = measure(&x, &plan, &proj, 0.0, s.child(3)).unwrap();
        (x, plan, proj, meas)
    }

    #[test]
    fn clean_gradient_requires_single_projection() {
        let (x, _, proj, _) = instance(3, 4);
        let r = clean_gradient(&SymMatrix::identity(8), &x, &proj, 0.0, &ObjectiveConfig::default(), SeedStream::new(0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn single_partition_error_vanishes() {
        let (x, plan, _, _) = instance(4, 1);
        let proj = draw_projections(&SensingConfig { l: 8, m: 3, p: 1, sigma_n: 0.0 }, SeedStream::new(9)).unwrap();
        let meas = measure(&x, &plan, &proj, 0.0, SeedStream::new(10)).unwrap();
        let sigma = toeplitz(8, 0.2);
        let cfg = ObjectiveConfig::default();
        let noisy = gradient(&sigma, &meas, &proj, &cfg).unwrap();
        let clean = reference_gradient(&sigma, &x.sample_covariance(), &proj, 0.0, &cfg).unwrap();
        assert!(gradient_error(&noisy, &clean).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn error_plus_clean_is_noisy() {
        let (x, _, proj, meas) = instance(5, 4);
        let sigma = toeplitz(8, 0.4);
        let cfg = ObjectiveConfig::default();
        let noisy = gradient(&sigma, &meas, &proj, &cfg).unwrap();
        let clean = reference_gradient(&sigma, &x.sample_covariance(), &proj, 0.0, &cfg).unwrap();
        let full = noisy.clone().with_reference(&clean).unwrap();
        let back = full.clean_ref.unwrap().add(full.error_ref.as_ref().unwrap()).unwrap();
        assert!(back.sub(&noisy.grad).unwrap().frobenius_norm() <= 1e-8 * noisy.grad.frobenius_norm());
    }

    #[test]
    fn provenance_mismatch_is_rejected() {
        let (x, _, proj, meas) = instance(6, 4);
        let cfg = ObjectiveConfig::default();
        let a = gradient(&toeplitz(8, 0.4), &meas, &proj, &cfg).unwrap();
        let b = reference_gradient(&toeplitz(8, 0.5), &x.sample_covariance(), &proj, 0.0, &cfg).unwrap();
        assert!(matches!(gradient_error(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn measured_error_matches_analytic_form_without_noise() {
        let (x, plan, proj, meas) = instance(7, 8);
        let cfg = ObjectiveConfig::default();
        let sigma = toeplitz(8, 0.1);
        let noisy = gradient(&sigma, &meas, &proj, &cfg).unwrap();
        let clean = reference_gradient(&sigma, &x.sample_covariance(), &proj, 0.0, &cfg).unwrap();
        let measured = gradient_error(&noisy, &clean).unwrap();
        let analytic = analytic_error(&x, &plan, &proj).unwrap();
        assert!(measured.sub(&analytic).unwrap().frobenius_norm() <= 1e-10 * analytic.frobenius_norm());
    }
}
