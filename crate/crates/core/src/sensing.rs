//! Random projections, noisy compressive measurements and compressed sample covariances.

use serde::{Deserialize, Serialize};

use crate::container::{Tensor, TensorFile};
use crate::data::{DataMatrix, PartitionPlan};
use crate::error::{Error, Result};
use crate::linalg::{symmetrize, sym_eigendecompose, Matrix, SymMatrix};
use crate::rng::{standard_normal, SeedStream};

const MAX_PROJECTION_DRAWS: usize = 10;
const MIN_SINGULAR_VALUE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingConfig {
    pub l: usize,
    pub m: usize,
    pub p: usize,
    pub sigma_n: f64,
}

impl SensingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m >= self.l {
            return Err(Error::invalid(format!(
                "compressed dimension must satisfy 1 <= m < l, got m={} l={}",
                self.m, self.l
            )));
        }
        if self.p == 0 {
            return Err(Error::invalid("partition count must be positive"));
        }
        if !(self.sigma_n >= 0.0) || !self.sigma_n.is_finite() {
            return Err(Error::invalid(format!("sensing noise must be >= 0, got {}", self.sigma_n)));
        }
        Ok(())
    }
}

/// Default sensing noise for synthetic runs: `0.01 · sqrt(trace(Σ) / l)`.
pub fn default_sigma_n(sigma: &SymMatrix) -> f64 {
    0.01 * (sigma.trace() / sigma.dim() as f64).sqrt()
}

/// One `l × m` projection matrix per partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionEnsemble {
    matrices: Vec<Matrix>,
}

impl ProjectionEnsemble {
    pub fn new(matrices: Vec<Matrix>) -> Result<Self> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::invalid("projection ensemble is empty"))?
            .shape();
        for p in &matrices {
            if p.shape() != first {
                return Err(Error::dim(format!(
                    "projection shapes differ: {:?} vs {:?}",
                    p.shape(),
                    first
                )));
            }
            if !p.is_finite() {
                return Err(Error::Data("projection has non-finite entries".into()));
            }
        }
        Ok(Self { matrices })
    }

    pub fn partitions(&self) -> usize {
        self.matrices.len()
    }

    /// Ambient dimension `l`.
    pub fn ambient_dim(&self) -> usize {
        self.matrices[0].rows()
    }

    /// Compressed dimension `m`.
    pub fn compressed_dim(&self) -> usize {
        self.matrices[0].cols()
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.matrices
    }

    pub fn get(&self, i: usize) -> &Matrix {
        &self.matrices[i]
    }

    /// `Σᵢ ‖P_i‖₂⁴`, the curvature bound of the multi-partition objective (up to a factor 2).
    pub fn spectral_norm_fourth_sum(&self) -> Result<f64> {
        self.matrices
            .iter()
            .map(|p| {
                let gram = symmetrize(&p.t_matmul(p)?)?;
                let top = sym_eigendecompose(&gram)?.eigenvalues[0];
                Ok(top * top)
            })
            .sum()
    }

    pub fn to_container(&self) -> TensorFile {
        TensorFile::new(
            self.matrices
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    Tensor::new(format!("P/{i}"), vec![p.rows(), p.cols()], p.as_slice().to_vec())
                        .expect("shape matches data")
                })
                .collect(),
        )
    }

    pub fn from_container(file: &TensorFile) -> Result<Self> {
        let mut matrices = Vec::new();
        for i in 0.. {
            let Some(t) = file.get(&format!("P/{i}")) else { break };
            if t.info.shape.len() != 2 {
                return Err(Error::format(format!("tensor P/{i} is not a matrix")));
            }
            matrices.push(Matrix::from_vec(t.info.shape[0], t.info.shape[1], t.data.clone())?);
        }
        if matrices.len() != file.tensors.len() {
            return Err(Error::format("projection container has tensors outside P/0..P/{p-1}"));
        }
        Self::new(matrices)
    }
}

fn smallest_singular_value(p: &Matrix) -> Result<f64> {
    let gram = symmetrize(&p.t_matmul(p)?)?;
    Ok(sym_eigendecompose(&gram)?.min_eigenvalue().max(0.0).sqrt())
}

/// `p` independent `l × m` matrices with i.i.d. `N(0, 1/m)` entries. Partition `i` uses child stream `i`.
pub fn draw_projections(cfg: &SensingConfig, seed: SeedStream) -> Result<ProjectionEnsemble> {
    cfg.validate()?;
    let sd = 1.0 / (cfg.m as f64).sqrt();
    let mut matrices = Vec::with_capacity(cfg.p);
    for i in 0..cfg.p {
        let mut rng = seed.child(i as u64).rng();
        let mut drawn = None;
        for _ in 0..MAX_PROJECTION_DRAWS {
            let p = Matrix::from_fn(cfg.l, cfg.m, |_, _| sd * standard_normal(&mut rng));
            if smallest_singular_value(&p)? > MIN_SINGULAR_VALUE {
                drawn = Some(p);
                break;
            }
        }
        matrices.push(drawn.ok_or_else(|| {
            Error::Numerical {
                message: format!("projection {i} stayed rank deficient after {MAX_PROJECTION_DRAWS} draws"),
                residual: 0.0,
            }
        })?);
    }
    ProjectionEnsemble::new(matrices)
}

/// `Y_i = P_iᵀ X_i + N_i` with `N_i` i.i.d. `N(0, sigma_n²)`.
pub fn measure_partition(x_i: &Matrix, p_i: &Matrix, sigma_n: f64, seed: SeedStream) -> Result<Matrix> {
    if x_i.rows() != p_i.rows() {
        return Err(Error::dim(format!(
            "data block has {} bands but projection has {} rows",
            x_i.rows(),
            p_i.rows()
        )));
    }
    let mut y = p_i.t_matmul(x_i)?;
    if sigma_n > 0.0 {
        let mut rng = seed.rng();
        for v in y.as_mut_slice() {
            *v += sigma_n * standard_normal(&mut rng);
        }
    }
    Ok(y)
}

/// `(1/b) Y Yᵀ`.
pub fn compressed_sample_cov(y: &Matrix) -> Result<SymMatrix> {
    if y.cols() == 0 {
        return Err(Error::dim("measurement block has no samples"));
    }
    let g = y.matmul_t(y)?;
    symmetrize(&g.scaled(1.0 / y.cols() as f64))
}

/// Per-partition compressed sample covariances `S̃_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub s_tilde: Vec<SymMatrix>,
    pub block_size: usize,
    /// Sensing noise standard deviation the measurements were taken with.
    pub sigma_n: f64,
}

impl MeasurementSet {
    pub fn partitions(&self) -> usize {
        self.s_tilde.len()
    }

    pub fn compressed_dim(&self) -> usize {
        self.s_tilde[0].dim()
    }
}

/// Measures every partition of `data`; partition `i` draws its sensing noise from child stream `i`.
pub fn measure(
    data: &DataMatrix,
    plan: &PartitionPlan,
    proj: &ProjectionEnsemble,
    sigma_n: f64,
    seed: SeedStream,
) -> Result<MeasurementSet> {
    if plan.partitions() != proj.partitions() {
        return Err(Error::dim(format!(
            "{} partitions but {} projections",
            plan.partitions(),
            proj.partitions()
        )));
    }
    if plan.samples() != data.samples() {
        return Err(Error::dim(format!(
            "partition plan covers {} samples, data has {}",
            plan.samples(),
            data.samples()
        )));
    }
    let s_tilde = plan
        .index_sets
        .iter()
        .zip(proj.matrices())
        .enumerate()
        .map(|(i, (idx, p))| {
            let y = measure_partition(&data.block(idx), p, sigma_n, seed.child(i as u64))?;
            compressed_sample_cov(&y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeasurementSet {
        s_tilde,
        block_size: plan.block_size,
        sigma_n,
    })
}
