//! Ground-truth covariances, Gaussian sample synthesis and random partitioning.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky_factor, symmetrize, Matrix, SymMatrix};
use crate::rng::{standard_normal, SeedStream};

/// Columns drawn from one child stream in [`sample_gaussian_data`].
pub const SAMPLE_BLOCK: usize = 256;

/// `l × n` sample matrix; column `j` is the sample `x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix(Matrix);

impl DataMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() == 0 || m.cols() == 0 {
            return Err(Error::Data("data matrix must have at least one band and one sample".into()));
        }
        if !m.is_finite() {
            return Err(Error::Data("data matrix has non-finite entries".into()));
        }
        Ok(Self(m))
    }

    pub fn bands(&self) -> usize {
        self.0.rows()
    }

    pub fn samples(&self) -> usize {
        self.0.cols()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    /// The columns listed in `idx`, as an `l × |idx|` block.
    pub fn block(&self, idx: &[usize]) -> Matrix {
        self.0.select_columns(idx)
    }

    /// `(1/n) X Xᵀ`.
    pub fn sample_covariance(&self) -> SymMatrix {
        let n = self.samples() as f64;
        let g = self.0.matmul_t(&self.0).expect("conformal");
        symmetrize(&g.scaled(1.0 / n)).expect("square")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceSpec {
    /// Entries `rho^|i-j|`.
    Toeplitz { rho: f64 },
    /// `scale · U Uᵀ + I` with `U` an `l × rank` Gaussian matrix divided by `√rank`.
    LowrankPlusIdentity { rank: usize, scale: f64 },
    /// Matrix read from a CSV file.
    FromFile { path: PathBuf },
}

impl CovarianceSpec {
    pub fn validate(&self, l: usize) -> Result<()> {
        if l == 0 {
            return Err(Error::invalid("covariance dimension must be positive"));
        }
        match *self {
            CovarianceSpec::Toeplitz { rho } if !(rho.abs() < 1.0) => {
                Err(Error::invalid(format!("toeplitz rho must satisfy |rho| < 1, got {rho}")))
            }
            CovarianceSpec::LowrankPlusIdentity { rank, scale } if rank == 0 || rank > l => Err(
                Error::invalid(format!("low-rank term needs 1 <= rank <= {l}, got {rank} (scale {scale})")),
            ),
            CovarianceSpec::LowrankPlusIdentity { scale, .. } if !(scale > 0.0) => {
                Err(Error::invalid(format!("low-rank scale must be positive, got {scale}")))
            }
            _ => Ok(()),
        }
    }
}

pub fn toeplitz(l: usize, rho: f64) -> SymMatrix {
    let m = Matrix::from_fn(l, l, |i, j| rho.powi(i.abs_diff(j) as i32));
    SymMatrix::from_symmetric_unchecked(m)
}

pub fn synth_covariance(spec: &CovarianceSpec, l: usize, seed: SeedStream) -> Result<SymMatrix> {
    spec.validate(l)?;
    let sigma = match spec {
        CovarianceSpec::Toeplitz { rho } => toeplitz(l, *rho),
        CovarianceSpec::LowrankPlusIdentity { rank, scale } => {
            let mut rng = seed.rng();
            let r = *rank;
            let u = Matrix::from_fn(l, r, |_, _| standard_normal(&mut rng) / (r as f64).sqrt());
            let mut s = u.matmul_t(&u)?.scaled(*scale);
            for i in 0..l {
                s[(i, i)] += 1.0;
            }
            symmetrize(&s)?
        }
        CovarianceSpec::FromFile { path } => {
            let m = linalg::csv::read_matrix(path)?;
            if m.shape() != (l, l) {
                return Err(Error::dim(format!(
                    "covariance file {} is {}x{}, expected {l}x{l}",
                    path.display(),
                    m.rows(),
                    m.cols()
                )));
            }
            SymMatrix::new(m)?
        }
    };
    // PD check; also rejects non-PD matrices read from file
    cholesky_factor(&sigma)?;
    Ok(sigma)
}

/// `n` i.i.d. draws `L z` with `L Lᵀ = sigma`. Column `j` uses child stream `j / SAMPLE_BLOCK`.
pub fn sample_gaussian_data(sigma: &SymMatrix, n: usize, seed: SeedStream) -> Result<DataMatrix> {
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let l = sigma.dim();
    let chol = cholesky_factor(sigma)?;
    let mut z = Matrix::zeros(l, n);
    for (block, start) in (0..n).step_by(SAMPLE_BLOCK).enumerate() {
        let mut rng = seed.child(block as u64).rng();
        for j in start..(start + SAMPLE_BLOCK).min(n) {
            for i in 0..l {
                z[(i, j)] = standard_normal(&mut rng);
            }
        }
    }
    DataMatrix::new(chol.matmul(&z)?)
}

/// Disjoint index blocks `Ω_1..Ω_p` of equal size `b = n / p` (0-based indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub block_size: usize,
    pub index_sets: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn partitions(&self) -> usize {
        self.index_sets.len()
    }

    pub fn samples(&self) -> usize {
        self.block_size * self.index_sets.len()
    }
}

/// Uniform random permutation of `0..n` sliced into `p` consecutive blocks.
pub fn make_partitions(n: usize, p: usize, seed: SeedStream) -> Result<PartitionPlan> {
    if p == 0 {
        return Err(Error::invalid("partition count must be positive"));
    }
    if p > n {
        return Err(Error::invalid(format!("cannot split {n} samples into {p} partitions")));
    }
    if n % p != 0 {
        return Err(Error::invalid(format!("partition count {p} does not divide {n}")));
    }
    let b = n / p;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed.rng());
    Ok(PartitionPlan {
        block_size: b,
        index_sets: perm.chunks(b).map(<[usize]>::to_vec).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigendecompose;

    #[test]
    fn toeplitz_examples() {
        let s = synth_covariance(&CovarianceSpec::Toeplitz { rho: 0.0 }, 4, SeedStream::new(0)).unwrap();
        assert_eq!(*s, Matrix::identity(4));
        let s = synth_covariance(&CovarianceSpec::Toeplitz { rho: 0.5 }, 2, SeedStream::new(0)).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn lowrank_min_eigenvalue_at_least_one() {
        let spec = CovarianceSpec::LowrankPlusIdentity { rank: 2, scale: 1.0 };
        for seed in 0..5 {
            let s = synth_covariance(&spec, 8, SeedStream::new(seed)).unwrap();
            let e = sym_eigendecompose(&s).unwrap();
            assert!(e.min_eigenvalue() >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(synth_covariance(&CovarianceSpec::Toeplitz { rho: 1.0 }, 4, SeedStream::new(0)).is_err());
        let bad = CovarianceSpec::LowrankPlusIdentity { rank: 9, scale: 1.0 };
        assert!(matches!(bad.validate(8), Err(Error::Validation(_))));
        let bad = CovarianceSpec::LowrankPlusIdentity { rank: 2, scale: 0.0 };
        assert!(bad.validate(8).is_err());
    }

    #[test]
    fn covariance_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sigma.csv");
        linalg::csv::write_matrix(&path, &toeplitz(3, 0.3)).unwrap();
        let s = synth_covariance(&CovarianceSpec::FromFile { path: path.clone() }, 3, SeedStream::new(0)).unwrap();
        assert_eq!(s, toeplitz(3, 0.3));
        assert!(synth_covariance(&CovarianceSpec::FromFile { path }, 4, SeedStream::new(0)).is_err());
    }

    #[test]
    fn identity_sample_covariance_converges() {
        let x = sample_gaussian_data(&SymMatrix::identity(32), 100_000, SeedStream::new(1)).unwrap();
        let s = x.sample_covariance();
        let rel = s.sub(&SymMatrix::identity(32)).unwrap().frobenius_norm() / 32f64.sqrt();
        assert!(rel <= 0.05, "relative error {rel}");
    }

    #[test]
    fn single_sample_is_rank_one() {
        let x = sample_gaussian_data(&toeplitz(4, 0.5), 1, SeedStream::new(2)).unwrap();
        let s = x.sample_covariance();
        let e = sym_eigendecompose(&s).unwrap();
        assert!(e.eigenvalues[1].abs() < 1e-12 * e.eigenvalues[0]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_gaussian_data(&toeplitz(5, 0.9), 700, SeedStream::new(3)).unwrap();
        let b = sample_gaussian_data(&toeplitz(5, 0.9), 700, SeedStream::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_rejects_indefinite() {
        let bad = SymMatrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(
            sample_gaussian_data(&bad, 10, SeedStream::new(0)),
            Err(Error::Definiteness { pivot: 1 })
        ));
    }

    #[test]
    fn partitions_cover_disjointly() {
        let plan = make_partitions(4, 2, SeedStream::new(5)).unwrap();
        assert_eq!(plan.partitions(), 2);
        let mut all: Vec<usize> = plan.index_sets.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);

        let plan = make_partitions(1024, 256, SeedStream::new(6)).unwrap();
        assert_eq!(plan.partitions(), 256);
        assert!(plan.index_sets.iter().all(|s| s.len() == 4));

        let single = make_partitions(10, 1, SeedStream::new(7)).unwrap();
        let mut s = single.index_sets[0].clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn partition_errors() {
        assert!(make_partitions(10, 3, SeedStream::new(0)).is_err());
        assert!(make_partitions(4, 8, SeedStream::new(0)).is_err());
        assert!(make_partitions(4, 0, SeedStream::new(0)).is_err());
    }

    #[test]
    fn partition_membership_is_uniform() {
        let trials = 10_000;
        let mut counts = [0usize; 8];
        let root = SeedStream::new(99);
        for t in 0..trials {
            let plan = make_partitions(8, 2, root.child(t)).unwrap();
            for &i in &plan.index_sets[0] {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn covariance_error_shrinks_like_inverse_sqrt_n() {
        let sigma = toeplitz(8, 0.7);
        let err = |n: usize, seed: u64| {
            let x = sample_gaussian_data(&sigma, n, SeedStream::new(seed)).unwrap();
            x.sample_covariance().sub(&sigma).unwrap().frobenius_norm()
        };
        let seeds = 20;
        let small: f64 = (0..seeds).map(|s| err(10_000, s)).sum::<f64>() / seeds as f64;
        let large: f64 = (0..seeds).map(|s| err(40_000, 100 + s)).sum::<f64>() / seeds as f64;
        // expected ratio 0.5; allow the statistical slack of the averaged estimate
        assert!(large <= 0.5 * small * 1.3, "small {small} large {large}");
        assert!(large >= 0.5 * small / 1.3, "small {small} large {large}");
    }
}
