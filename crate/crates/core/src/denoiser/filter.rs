//! Gaussian blur of a matrix treated as an image.

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Matrix, SymMatrix};

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("kernel sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Half-sample symmetric extension: `… c b a | a b c … | c b a …`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

fn blur_rows(a: &Matrix, taps: &[f64]) -> Matrix {
    let r = (taps.len() / 2) as isize;
    let (rows, cols) = a.shape();
    Matrix::from_fn(rows, cols, |i, j| {
        taps.iter()
            .enumerate()
            .map(|(t, w)| w * a[(i, reflect(j as isize + t as isize - r, cols))])
            .sum()
    })
}

/// Separable 2-D Gaussian blur with reflect padding, then symmetrization.
pub fn gaussian_filter_precondition(g: &SymMatrix, kernel_sigma: f64) -> Result<SymMatrix> {
    let taps = gaussian_kernel(kernel_sigma)?;
    let horizontal = blur_rows(g, &taps);
    let both = blur_rows(&horizontal.transpose(), &taps).transpose();
    symmetrize(&both)
}
