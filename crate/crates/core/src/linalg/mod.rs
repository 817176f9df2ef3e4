//! Dense matrix primitives.
//!
//! [`Matrix`] is a plain row-major real matrix. [`SymMatrix`] wraps a square
//! matrix that is known to be symmetric and is the carrier for covariances,
//! gradients and gradient errors throughout the crate.

mod eigen;
pub mod csv;

use std::ops::{Deref, Index, IndexMut};

pub use eigen::{sym_eigendecompose, Spectrum};

use crate::error::{Error, Result};

/// Relative tolerance used to decide whether a matrix is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Sub-matrix made of the given columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, cols.len(), |i, j| self[(i, cols[j])])
    }

    /// The leading `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.rows, k, |i, j| self[(i, j)])
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    /// Frobenius inner product `<self, other>`.
    pub fn dot(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Matrix product.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm(1.0, self, false, rhs, false, 0.0, &mut out);
        Ok(out)
    }

    /// `selfᵀ · rhs` without forming the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::dim(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        gemm(1.0, self, true, rhs, false, 0.0, &mut out);
        Ok(out)
    }

    /// `self · rhsᵀ` without forming the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        gemm(1.0, self, false, rhs, true, 0.0, &mut out);
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    /// In-place `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Largest absolute value of `a[i,j] - a[j,i]`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `c ← alpha · op(a) · op(b) + beta · c` on row-major storage.
pub(crate) fn gemm(
    alpha: f64,
    a: &Matrix,
    a_t: bool,
    b: &Matrix,
    b_t: bool,
    beta: f64,
    c: &mut Matrix,
) {
    let (m, k) = if a_t { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if b_t { b.rows } else { b.cols };
    debug_assert_eq!(if b_t { b.cols } else { b.rows }, k);
    debug_assert_eq!(c.shape(), (m, n));
    let (rsa, csa) = if a_t { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if b_t { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents describe the owned buffers exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Symmetric square matrix.
///
/// Construction checks symmetry to `SYMMETRY_TOL · max(1, max|a|)` and
/// finiteness; [`symmetrize`] is the way to obtain one from arbitrary input.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dim(format!("{}x{} matrix is not square", m.rows, m.cols)));
        }
        if m.rows == 0 {
            return Err(Error::dim("empty matrix"));
        }
        if !m.is_finite() {
            return Err(Error::Data("matrix has non-finite entries".into()));
        }
        let tol = SYMMETRY_TOL * m.max_abs().max(1.0);
        let asym = m.max_asymmetry();
        if asym > tol {
            return Err(Error::Validation(format!(
                "matrix is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        Ok(Self(m))
    }

    /// Wraps without checking. Callers guarantee exact symmetry.
    pub(crate) fn from_symmetric_unchecked(m: Matrix) -> Self {
        debug_assert!(m.is_square());
        Self(m)
    }

    pub fn zeros(n: usize) -> Self {
        Self(Matrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self(Matrix::from_diag(diag))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn scaled(&self, s: f64) -> SymMatrix {
        Self(self.0.scaled(s))
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        Ok(Self(self.0.add(&other.0)?))
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<SymMatrix> {
        Ok(Self(self.0.sub(&other.0)?))
    }

    /// `self + s · other`.
    pub fn add_scaled(&self, s: f64, other: &SymMatrix) -> Result<SymMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::dim(format!("{} vs {}", self.dim(), other.dim())));
        }
        let mut m = self.0.clone();
        m.axpy(s, &other.0);
        Ok(Self(m))
    }
}

impl Deref for SymMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// `0.5 · (a + aᵀ)`.
pub fn symmetrize(a: &Matrix) -> Result<SymMatrix> {
    if !a.is_square() {
        return Err(Error::dim(format!("{}x{} matrix is not square", a.rows, a.cols)));
    }
    if a.rows == 0 {
        return Err(Error::dim("empty matrix"));
    }
    let n = a.rows;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = a[(i, i)];
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(SymMatrix(out))
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Frobenius-nearest positive semidefinite matrix: clamps negative eigenvalues to zero.
pub fn project_psd(a: &SymMatrix) -> Result<SymMatrix> {
    let spec = sym_eigendecompose(a)?;
    Ok(spec.reconstruct_with(|l| l.max(0.0)))
}

/// Lower-triangular `L` with `L Lᵀ = a`.
pub fn cholesky_factor(a: &SymMatrix) -> Result<Matrix> {
    let n = a.dim();
    let floor = 1e-12 * (a.trace() / n as f64).abs();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > floor) {
            return Err(Error::Definiteness { pivot: j });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Cosines of the principal angles between the column spans of `u` and `v`,
/// i.e. the singular values of `uᵀv` in descending order.
pub fn principal_angle_cosines(u: &Matrix, v: &Matrix) -> Result<Vec<f64>> {
    if u.shape() != v.shape() {
        return Err(Error::dim(format!(
            "subspace bases {:?} and {:?} differ in shape",
            u.shape(),
            v.shape()
        )));
    }
    let m = u.t_matmul(v)?;
    let gram = symmetrize(&m.t_matmul(&m)?)?;
    let spec = sym_eigendecompose(&gram)?;
    Ok(spec
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt().min(1.0))
        .collect())
}
