//! Small dense complex linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn eye(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn zeros(r: usize, c: usize) -> CMat {
    CMat::zeros(r, c)
}

/// (M + M†)/2
pub fn herm(m: &CMat) -> CMat {
    (m + m.adjoint()) * cr(0.5)
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().fold(0.0, |a, z| a.max(z.norm()))
}

pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

/// Largest deviation from Hermitian symmetry relative to the largest entry.
pub fn hermitian_defect(m: &CMat) -> f64 {
    if m.nrows() != m.ncols() {
        return f64::INFINITY;
    }
    let scale = max_abs(m).max(f64::MIN_POSITIVE);
    let mut d: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            d = d.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    d / scale
}

pub fn ensure_hermitian(m: &CMat, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Contract(format!("{what}: matrix is {}x{}, expected square", m.nrows(), m.ncols())));
    }
    let d = hermitian_defect(m);
    if d > 1e-8 {
        return Err(Error::Contract(format!("{what}: input is not Hermitian (defect {d:.2e})")));
    }
    Ok(())
}

pub fn trace(m: &CMat) -> C64 {
    m.diagonal().sum()
}

/// Tr(A B) without forming the product.
pub fn trace_prod(a: &CMat, b: &CMat) -> C64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut s = ZERO;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

pub fn fro2(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

pub fn inverse(m: &CMat, what: &str) -> Result<CMat> {
    let lu = m.clone().lu();
    lu.try_inverse().ok_or_else(|| Error::Singular(what.to_string())).and_then(|inv| {
        if inv.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            Ok(inv)
        } else {
            Err(Error::Singular(what.to_string()))
        }
    })
}

/// Solve M X = B by LU.
pub fn solve(m: &CMat, b: &CMat, what: &str) -> Result<CMat> {
    let lu = m.clone().lu();
    lu.solve(b)
        .filter(|x| x.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
        .ok_or_else(|| Error::Singular(what.to_string()))
}

/// Eigenvalues of a Hermitian matrix (ascending).
pub fn herm_eigvals(m: &CMat) -> Vec<f64> {
    let e = herm(m).symmetric_eigenvalues();
    let mut v: Vec<f64> = e.iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

pub fn herm_eigen(m: &CMat) -> (Vec<f64>, CMat) {
    let e = herm(m).symmetric_eigen();
    (e.eigenvalues.iter().copied().collect(), e.eigenvectors)
}

/// log det of a Hermitian positive definite matrix (natural log).
pub fn logdet_hpd(m: &CMat) -> Option<f64> {
    let ch = herm(m).cholesky()?;
    let l = ch.l_dirty();
    let mut s = 0.0;
    for i in 0..m.nrows() {
        let d = l[(i, i)].re;
        if !(d > 0.0) {
            return None;
        }
        s += d.ln();
    }
    Some(2.0 * s)
}

/// Inverse of a Hermitian positive definite matrix via Cholesky.
pub fn inverse_hpd(m: &CMat) -> Option<CMat> {
    herm(m).cholesky().map(|c| herm(&c.inverse()))
}

/// Condition number of a Hermitian PSD matrix from its eigenvalues.
pub fn cond_hpd(m: &CMat) -> f64 {
    let ev = herm_eigvals(m);
    let lo = ev.first().copied().unwrap_or(0.0);
    let hi = ev.last().copied().unwrap_or(0.0);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn block_diag(blocks: &[CMat]) -> CMat {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cc: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = zeros(r, cc);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), (b.nrows(), b.ncols())).copy_from(b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

pub fn hstack(blocks: &[&CMat]) -> CMat {
    let r = blocks.first().map_or(0, |b| b.nrows());
    let cc: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = zeros(r, cc);
    let mut j = 0;
    for b in blocks {
        out.view_mut((0, j), (r, b.ncols())).copy_from(*b);
        j += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[&CMat]) -> CMat {
    let cc = blocks.first().map_or(0, |b| b.ncols());
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = zeros(r, cc);
    let mut i = 0;
    for b in blocks {
        out.view_mut((i, 0), (b.nrows(), cc)).copy_from(*b);
        i += b.nrows();
    }
    out
}

pub fn sub(m: &CMat, r0: usize, c0: usize, nr: usize, nc: usize) -> CMat {
    m.view((r0, c0), (nr, nc)).into_owned()
}

/// Diagonal block `i` of a matrix partitioned into equal blocks of size `b`.
pub fn diag_block(m: &CMat, i: usize, b: usize) -> CMat {
    sub(m, i * b, i * b, b, b)
}

pub fn diag_matrix(d: &[C64]) -> CMat {
    CMat::from_diagonal(&CVec::from_column_slice(d))
}

/// Scale columns of `m` by `d` in place (M diag(d)).
pub fn scale_cols(m: &mut CMat, d: &[C64]) {
    for (j, s) in d.iter().enumerate() {
        m.column_mut(j).scale_mut_c(*s);
    }
}

/// Scale rows of `m` by `d` in place (diag(d) M).
pub fn scale_rows(m: &mut CMat, d: &[C64]) {
    for (i, s) in d.iter().enumerate() {
        m.row_mut(i).scale_mut_c(*s);
    }
}

trait ScaleC {
    fn scale_mut_c(&mut self, s: C64);
}

impl<S> ScaleC for nalgebra::Matrix<C64, nalgebra::Dyn, nalgebra::U1, S>
where
    S: nalgebra::StorageMut<C64, nalgebra::Dyn, nalgebra::U1>,
{
    fn scale_mut_c(&mut self, s: C64) {
        for z in self.iter_mut() {
            *z *= s;
        }
    }
}

impl<S> ScaleC for nalgebra::Matrix<C64, nalgebra::U1, nalgebra::Dyn, S>
where
    S: nalgebra::StorageMut<C64, nalgebra::U1, nalgebra::Dyn>,
{
    fn scale_mut_c(&mut self, s: C64) {
        for z in self.iter_mut() {
            *z *= s;
        }
    }
}

/// Relative Frobenius error ‖a − b‖ / ‖b‖.
pub fn rel_err(a: &CMat, b: &CMat) -> f64 {
    let d = fro2(&(a - b)).sqrt();
    let n = fro2(b).sqrt();
    if n == 0.0 {
        d
    } else {
        d / n
    }
}

/// out += alpha * a * b
#[inline]
pub fn gemm_acc(out: &mut CMat, alpha: C64, a: &CMat, b: &CMat) {
    out.gemm(alpha, a, b, ONE);
}

/// a * b† without materializing the adjoint.
pub fn mul_adj(a: &CMat, b: &CMat) -> CMat {
    let mut out = zeros(a.nrows(), b.nrows());
    out.gemm(ONE, a, &b.adjoint(), ZERO);
    out
}

/// a† * b
pub fn adj_mul(a: &CMat, b: &CMat) -> CMat {
    a.ad_mul(b)
}
