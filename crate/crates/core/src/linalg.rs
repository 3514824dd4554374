//! Dense complex linear-algebra helpers shared by the estimation, DE and
//! Monte Carlo code.
//!
//! Complex products are routed through four real GEMMs. nalgebra's real
//! kernel is blocked and vectorized while its complex path is not, so the
//! split is several times faster for the matrix sizes used here.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;
pub type RMat = DMatrix<f64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Below this inner dimension the plain complex kernel is used.
const SPLIT_THRESHOLD: usize = 8;

pub fn split(a: &CMat) -> (RMat, RMat) {
    (a.map(|z| z.re), a.map(|z| z.im))
}

pub fn join(re: &RMat, im: &RMat) -> CMat {
    re.zip_map(im, Complex64::new)
}

/// `a * b`.
pub fn matmul(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions differ");
    if a.ncols() < SPLIT_THRESHOLD || a.nrows() < SPLIT_THRESHOLD || b.ncols() < SPLIT_THRESHOLD {
        return a * b;
    }
    let (ar, ai) = split(a);
    let (br, bi) = split(b);
    let mut re = RMat::zeros(a.nrows(), b.ncols());
    let mut im = RMat::zeros(a.nrows(), b.ncols());
    re.gemm(1.0, &ar, &br, 0.0);
    re.gemm(-1.0, &ai, &bi, 1.0);
    im.gemm(1.0, &ar, &bi, 0.0);
    im.gemm(1.0, &ai, &br, 1.0);
    join(&re, &im)
}

/// `a * b * c`.
pub fn matmul3(a: &CMat, b: &CMat, c: &CMat) -> CMat {
    matmul(&matmul(a, b), c)
}

/// `tr(a b)` without forming the product.
pub fn trace_prod(a: &CMat, b: &CMat) -> Complex64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = ZERO;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Real part of `tr(a b)`; exact for products of two Hermitian matrices.
pub fn re_trace_prod(a: &CMat, b: &CMat) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let x = a[(i, j)];
            let y = b[(j, i)];
            acc += x.re * y.re - x.im * y.im;
        }
    }
    acc
}

pub fn trace(a: &CMat) -> Complex64 {
    a.diagonal().iter().sum()
}

/// `(a + a^H) / 2`.
pub fn hermitize(a: &CMat) -> CMat {
    (a + a.adjoint()).scale(0.5)
}

pub fn hermitian_defect(a: &CMat) -> f64 {
    max_abs_diff(a, &a.adjoint())
}

pub fn max_abs(a: &CMat) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Accumulates `y += s * x` in place.
pub fn axpy(y: &mut CMat, s: f64, x: &CMat) {
    y.zip_apply(x, |a, b| *a += b * s);
}

/// Inverse of a Hermitian positive-definite matrix; falls back to LU when the
/// Cholesky factorization breaks down numerically.
pub fn inv_hpd(a: &CMat) -> Result<CMat> {
    if let Some(ch) = a.clone().cholesky() {
        let inv = ch.inverse();
        return Ok(hermitize(&inv));
    }
    a.clone()
        .try_inverse()
        .map(|inv| hermitize(&inv))
        .ok_or_else(|| Error::Conditioning("matrix is singular".into()))
}

/// Eigenvalues of a Hermitian matrix in ascending order.
pub fn eigvals_hermitian(a: &CMat) -> Vec<f64> {
    let mut ev: Vec<f64> = hermitize(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

pub fn min_eigenvalue(a: &CMat) -> f64 {
    eigvals_hermitian(a).first().copied().unwrap_or(0.0)
}

/// Hermitian PSD square root via eigendecomposition. Negative eigenvalues,
/// which arise only from rounding on rank-deficient inputs, are clipped to 0.
pub fn sqrt_psd(a: &CMat) -> CMat {
    let n = a.nrows();
    if n == 0 {
        return a.clone();
    }
    let eig = hermitize(a).symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    matmul(&scaled, &eig.eigenvectors.adjoint())
}

/// Solves the real system `a x = b` by LU.
pub fn solve_real(a: &RMat, b: &RMat) -> Result<RMat> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Conditioning("singular K x K system".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, m: usize, seed: u64) -> CMat {
        CMat::from_fn(n, m, |i, j| {
            let x = ((i * 31 + j * 17) as u64 ^ seed) as f64;
            Complex64::new((x * 0.37).sin(), (x * 0.11).cos())
        })
    }

    #[test]
    fn split_product_matches_direct() {
        let a = sample(20, 13, 3);
        let b = sample(13, 17, 9);
        let fast = matmul(&a, &b);
        let slow = &a * &b;
        assert!(max_abs_diff(&fast, &slow) < 1e-12);
    }

    #[test]
    fn trace_product_matches_formed_product() {
        let a = sample(9, 9, 1);
        let b = sample(9, 9, 2);
        let direct = trace(&(&a * &b));
        assert!((trace_prod(&a, &b) - direct).norm() < 1e-12);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let g = sample(10, 4, 5);
        let a = &g * g.adjoint();
        let s = sqrt_psd(&a);
        assert!(max_abs_diff(&(&s * &s), &a) < 1e-10);
        assert!(hermitian_defect(&s) < 1e-12);
    }

    #[test]
    fn hpd_inverse() {
        let g = sample(12, 12, 7);
        let a = &g * g.adjoint() + identity(12);
        let inv = inv_hpd(&a).unwrap();
        assert!(max_abs_diff(&(&a * &inv), &identity(12)) < 1e-10);
    }
}
