use super::{Matrix, SymMatrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Eigenvalues in descending order with their orthonormal eigenvectors (columns).
///
/// Each eigenvector is signed so that its largest-magnitude component is
/// nonnegative (first such component on ties).
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V diag(f(λ)) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.dim();
        let v = &self.eigenvectors;
        let scaled = Matrix::from_fn(n, n, |i, k| v[(i, k)] * f(self.eigenvalues[k]));
        let mut out = scaled.matmul_t(v).expect("square factors");
        // force exact symmetry
        for i in 0..n {
            for j in (i + 1)..n {
                let s = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        SymMatrix::from_symmetric_unchecked(out)
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.reconstruct_with(|l| l)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    /// Eigenvector `k` (descending order) as a vector.
    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.eigenvectors.column(k)
    }
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += a[(i, j)] * a[(i, j)];
        }
    }
    (2.0 * s).sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eigendecompose(a: &SymMatrix) -> Result<Spectrum> {
    let n = a.dim();
    let mut w = a.as_matrix().clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();

    if scale == 0.0 {
        return Ok(finish(vec![0.0; n], v));
    }

    let target = f64::EPSILON * scale;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&w) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = w[(p, p)];
                let aqq = w[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // W ← Jᵀ W J with J the (p, q) rotation
                for k in 0..n {
                    let wkp = w[(k, p)];
                    let wkq = w[(k, q)];
                    w[(k, p)] = c * wkp - s * wkq;
                    w[(k, q)] = s * wkp + c * wkq;
                }
                for k in 0..n {
                    let wpk = w[(p, k)];
                    let wqk = w[(q, k)];
                    w[(p, k)] = c * wpk - s * wqk;
                    w[(q, k)] = s * wpk + c * wqk;
                }
                w[(p, q)] = 0.0;
                w[(q, p)] = 0.0;

                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let residual = off_diagonal_norm(&w);
        if residual > 1e-10 * scale {
            return Err(Error::Numerical {
                message: format!("Jacobi sweeps did not converge for {n}x{n} matrix"),
                residual,
            });
        }
    }
    let values = (0..n).map(|i| w[(i, i)]).collect();
    Ok(finish(values, v))
}

fn finish(values: Vec<f64>, v: Matrix) -> Spectrum {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));

    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut lead = 0;
        for i in 0..n {
            if v[(i, src)].abs() > v[(lead, src)].abs() {
                lead = i;
            }
        }
        let sign = if v[(lead, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, dst)] = sign * v[(i, src)];
        }
    }
    Spectrum {
        eigenvalues: order.iter().map(|&i| values[i]).collect(),
        eigenvectors: vectors,
    }
}
