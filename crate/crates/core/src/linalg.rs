//! Complex dense linear algebra helpers shared by the channel, estimation
//! and beamforming code. Matrices are column-major `nalgebra` matrices, so
//! `vec(X)` is simply the underlying storage.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Column-stacking vectorisation.
pub fn vec_of(m: &CMat) -> CVec {
    CVec::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`].
pub fn unvec(v: &CVec, rows: usize, cols: usize) -> CMat {
    CMat::from_column_slice(rows, cols, v.as_slice())
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

/// `A·B` through the packed complex GEMM kernel.
pub fn mul(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.ncols(), b.nrows(), "mul: inner dimensions differ");
    let (m, k) = a.shape();
    gemm(m, k, b.ncols(), a.as_ptr(), 1, m as isize, b)
}

/// `Aᴴ·B`.
pub fn mul_ah(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.nrows(), b.nrows(), "mul_ah: inner dimensions differ");
    let (k, m) = a.shape();
    let ac = a.map(|z| z.conj());
    gemm(m, k, b.ncols(), ac.as_ptr(), k as isize, 1, b)
}

/// `A·Bᴴ`.
pub fn mul_bh(a: &CMat, b: &CMat) -> CMat {
    mul(a, &b.adjoint())
}

fn gemm(m: usize, k: usize, n: usize, a: *const C64, rsa: isize, csa: isize, b: &CMat) -> CMat {
    let mut c = CMat::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: `a` addresses an m×k operand through (rsa, csa) inside a live
    // allocation, `b` is k×n column-major, `c` is m×n column-major, and
    // Complex64 is repr(C) with the same layout as [f64; 2].
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a as *const [f64; 2],
            rsa,
            csa,
            b.as_ptr() as *const [f64; 2],
            1,
            k as isize,
            [0.0, 0.0],
            c.as_mut_ptr() as *mut [f64; 2],
            1,
            m as isize,
        );
    }
    c
}

/// Column-wise Kronecker product.
pub fn khatri_rao(a: &CMat, b: &CMat) -> Result<CMat> {
    if a.ncols() != b.ncols() {
        return Err(shape(
            "khatri_rao",
            format!("{} vs {} columns", a.ncols(), b.ncols()),
        ));
    }
    let (ra, rb) = (a.nrows(), b.nrows());
    let mut out = CMat::zeros(ra * rb, a.ncols());
    for j in 0..a.ncols() {
        for i in 0..ra {
            let aij = a[(i, j)];
            for k in 0..rb {
                out[(i * rb + k, j)] = aij * b[(k, j)];
            }
        }
    }
    Ok(out)
}

/// Frobenius inner product `tr(Aᴴ B)`.
pub fn inner(a: &CMat, b: &CMat) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Real part of the Frobenius inner product, the metric used on every
/// complex matrix space in this crate.
pub fn real_inner(a: &CMat, b: &CMat) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.re * y.re + x.im * y.im)
        .sum()
}

pub fn frob2(a: &CMat) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

pub fn vnorm2(v: &CVec) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum()
}

/// `diag(d) · m`
pub fn scale_rows(d: &CVec, m: &CMat) -> CMat {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= d[i];
    }
    out
}

/// `m · diag(d)`
pub fn scale_cols(m: &CMat, d: &CVec) -> CMat {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= d[j];
    }
    out
}

pub fn diag_matrix(d: &CVec) -> CMat {
    CMat::from_diagonal(d)
}

/// Block-diagonal assembly.
pub fn blkdiag(blocks: &[CMat]) -> CMat {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Singular values, largest first.
pub fn singular_values(m: &CMat) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Count of singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &CMat, rel_tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&x| x > rel_tol * smax).count(),
        _ => 0,
    }
}

/// Hermitian part `(A + Aᴴ)/2`.
pub fn hermitian_part(a: &CMat) -> CMat {
    (a + a.adjoint()) * C64::new(0.5, 0.0)
}

/// Inverse of a Hermitian positive definite matrix, falling back to LU when
/// Cholesky fails numerically.
pub fn hpd_inverse(a: &CMat) -> Option<CMat> {
    let h = hermitian_part(a);
    match h.clone().cholesky() {
        Some(c) => Some(c.inverse()),
        None => h.try_inverse(),
    }
}

/// `ln det` of a Hermitian positive definite matrix.
pub fn hpd_log_det(a: &CMat) -> Option<f64> {
    let c = hermitian_part(a).cholesky()?;
    let l = c.l();
    Some(2.0 * (0..l.nrows()).map(|i| l[(i, i)].re.ln()).sum::<f64>())
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(a: &CMat) -> f64 {
    hermitian_part(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Circularly symmetric complex Gaussian sample with variance `var`.
pub fn cn<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(s * re, s * im)
}

pub fn cn_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, var: f64) -> CMat {
    CMat::from_fn(rows, cols, |_, _| cn(rng, var))
}

pub fn cn_vector<R: Rng + ?Sized>(rng: &mut R, len: usize, var: f64) -> CVec {
    CVec::from_fn(len, |_, _| cn(rng, var))
}

/// Uniformly distributed point on the unit circle.
pub fn unit_phase<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    C64::from_polar(1.0, theta)
}

pub fn unit_phase_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> CVec {
    CVec::from_fn(len, |_, _| unit_phase(rng))
}

pub fn is_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}
