//! Dense row-major matrices, covariance estimation, the cyclic Jacobi symmetric
//! eigensolver and anisotropic Gaussian sampling.

use crate::binio::{Reader, Writer};
use crate::error::{check_len, invalid, Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;

const PMAT_MAGIC: &[u8; 4] = b"PMAT";
const PMAT_VERSION: u8 = 1;

/// Maximum number of full Jacobi sweeps before giving up.
pub const MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        check_len(rows * cols, data.len())?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_len(self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        check_len(self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · x`.
    pub fn matvec_transposed(&self, x: &[T]) -> Result<Vec<T>> {
        check_len(self.rows, x.len())?;
        let mut out = vec![T::zero(); self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == T::zero() {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o = *o + a * xr;
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest `|a_ij - a_ji|`; `None` for non-square matrices.
    pub fn asymmetry(&self) -> Option<T> {
        if !self.is_square() {
            return None;
        }
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        Some(worst)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_len(self.rows, other.rows)?;
        check_len(self.cols, other.cols)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Raw `PMAT` container: magic, version, rows, cols, then real64 LE entries.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(PMAT_MAGIC, PMAT_VERSION);
        w.u32(self.rows as u32);
        w.u32(self.cols as u32);
        w.f64s(self.data.iter().map(|x| x.as_f64()));
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("PMAT", bytes, PMAT_MAGIC, PMAT_VERSION)?;
        let m = Self::read_body(&mut r)?;
        r.finish()?;
        Ok(m)
    }

    pub(crate) fn write_body(&self, w: &mut Writer) {
        w.u32(self.rows as u32);
        w.u32(self.cols as u32);
        w.f64s(self.data.iter().map(|x| x.as_f64()));
    }

    pub(crate) fn read_body(r: &mut Reader<'_>) -> Result<Self> {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| r.err("size overflow"))?;
        let data = r.f64s(n)?.into_iter().map(T::of).collect();
        Self::from_vec(rows, cols, data).map_err(|e| r.err(e.to_string()))
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Normalization used by [`covariance`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Denominator {
    /// Divide by `n` (maximum likelihood).
    #[default]
    Population,
    /// Divide by `n - 1` (unbiased).
    Sample,
}

pub fn mean_vector<T: Scalar, S: AsRef<[T]>>(samples: &[S]) -> Result<Vec<T>> {
    let first = samples.first().ok_or(Error::NotEnoughSamples { needed: 1, got: 0 })?;
    let d = first.as_ref().len();
    let mut mean = vec![T::zero(); d];
    for s in samples {
        let s = s.as_ref();
        check_len(d, s.len())?;
        for (m, &x) in mean.iter_mut().zip(s) {
            *m = *m + x;
        }
    }
    let n = T::of(samples.len() as f64);
    mean.iter_mut().for_each(|m| *m = *m / n);
    Ok(mean)
}

/// Covariance of `samples` around their mean. The result is exactly symmetric.
pub fn covariance<T: Scalar, S: AsRef<[T]>>(samples: &[S], denom: Denominator) -> Result<Matrix<T>> {
    if samples.len() < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: samples.len() });
    }
    let mean = mean_vector(samples)?;
    let d = mean.len();
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![T::zero(); d];
    for s in samples {
        for ((c, &x), &m) in centered.iter_mut().zip(s.as_ref()).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == T::zero() {
                continue;
            }
            let row = &mut cov.data[i * d..(i + 1) * d];
            for j in i..d {
                row[j] = row[j] + ci * centered[j];
            }
        }
    }
    let n = match denom {
        Denominator::Population => samples.len(),
        Denominator::Sample => samples.len() - 1,
    };
    let n = T::of(n as f64);
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Symmetric eigendecomposition `M = U · diag(λ) · Uᵀ`.
#[derive(Clone, Debug)]
pub struct EigenDecomposition<T> {
    /// Sorted descending.
    pub eigenvalues: Vec<T>,
    /// Columns are the orthonormal eigenvectors, in eigenvalue order.
    pub eigenvectors: Matrix<T>,
}

impl<T: Scalar> EigenDecomposition<T> {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Eigenvalues with negative round-off clamped to zero.
    pub fn clamped_eigenvalues(&self) -> Vec<T> {
        self.eigenvalues.iter().map(|&l| l.max(T::zero())).collect()
    }

    /// `U · diag(λ) · Uᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let n = self.dim();
        let u = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = T::zero();
                for k in 0..n {
                    s = s + u[(i, k)] * self.eigenvalues[k] * u[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps rotate every off-diagonal pair until the off-diagonal Frobenius norm
/// falls below `1e-12 · ‖M‖_F` (or the scalar's precision floor for `f32`).
pub fn sym_eig<T: Scalar>(m: &Matrix<T>) -> Result<EigenDecomposition<T>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch { expected: m.rows(), actual: m.cols() });
    }
    let n = m.rows();
    let scale = T::one().max(m.max_abs());
    let asym = m.asymmetry().unwrap_or(T::zero());
    if asym > T::of(1e-9) * scale {
        return Err(Error::NotSymmetric { asymmetry: asym.as_f64() });
    }

    // Work on an exactly symmetric copy; `vt` holds eigenvectors as rows.
    let mut a = m.clone();
    for i in 0..n {
        for j in i + 1..n {
            let avg = (a[(i, j)] + a[(j, i)]) / T::of(2.0);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let mut vt = Matrix::<T>::identity(n);
    let tol = T::solver_epsilon() * m.frobenius_norm();

    let off_norm = |a: &Matrix<T>| -> T {
        let mut s = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                s = s + a[(i, j)] * a[(i, j)];
            }
        }
        (s + s).sqrt()
    };

    let mut converged = n < 2;
    for sweep in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        if off_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Late sweeps: drop elements that no longer affect the diagonal.
                let g = T::of(100.0) * apq.abs();
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[(p, q)] = T::zero();
                    a[(q, p)] = T::zero();
                    continue;
                }
                rotate(&mut a, &mut vt, p, q);
            }
        }
    }
    if !converged {
        let last_off = off_norm(&a);
        if last_off > tol {
            return Err(Error::NotConverged { sweeps: MAX_SWEEPS, off_norm: last_off.as_f64() });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors[(r, col)] = vt[(src, r)];
        }
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

/// One Jacobi rotation annihilating `a[p][q]`; accumulates into the rows of `vt`.
fn rotate<T: Scalar>(a: &mut Matrix<T>, vt: &mut Matrix<T>, p: usize, q: usize) {
    let n = a.rows();
    let apq = a[(p, q)];
    let app = a[(p, p)];
    let aqq = a[(q, q)];
    let theta = (aqq - app) / (T::of(2.0) * apq);
    let t = {
        let mag = T::one() / (theta.abs() + (theta * theta + T::one()).sqrt());
        if theta < T::zero() {
            -mag
        } else {
            mag
        }
    };
    let c = T::one() / (t * t + T::one()).sqrt();
    let s = t * c;

    // Rows p and q are contiguous; rotate them, then mirror into columns p and q.
    let (lo, hi) = a.data.split_at_mut(q * n);
    let row_p = &mut lo[p * n..(p + 1) * n];
    let row_q = &mut hi[..n];
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = row_p[k];
        let akq = row_q[k];
        row_p[k] = c * akp - s * akq;
        row_q[k] = s * akp + c * akq;
    }
    row_p[p] = app - t * apq;
    row_q[q] = aqq + t * apq;
    row_p[q] = T::zero();
    row_q[p] = T::zero();
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let vp = a.data[p * n + k];
        let vq = a.data[q * n + k];
        a.data[k * n + p] = vp;
        a.data[k * n + q] = vq;
    }

    let (lo, hi) = vt.data.split_at_mut(q * n);
    let vp = &mut lo[p * n..(p + 1) * n];
    let vq = &mut hi[..n];
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Draws `e = U · diag(√σ) · z` with `z` standard normal.
///
/// Each `σᵢ` is the variance along column `i` of `U`.
pub fn sample_anisotropic_gaussian<T: Scalar>(
    basis: &Matrix<T>,
    sigma: &[T],
    rng: &mut RngStream,
) -> Result<Vec<T>> {
    check_len(basis.cols(), sigma.len())?;
    if let Some(bad) = sigma.iter().find(|s| !(**s >= T::zero())) {
        return Err(invalid(format!("noise variance must be non-negative, got {bad}")));
    }
    let scaled: Vec<T> = sigma.iter().map(|&s| T::of(rng.standard_normal()) * s.sqrt()).collect();
    basis.matvec(&scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_symmetric(n: usize, seed: u64) -> Matrix<f64> {
        let mut rng = RngStream::new(seed, "sym");
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.standard_normal();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    fn check_invariants(m: &Matrix<f64>, e: &EigenDecomposition<f64>) {
        let n = m.rows();
        let u = &e.eigenvectors;
        let utu = u.transpose().matmul(u).unwrap();
        let orth = utu.sub(&Matrix::identity(n)).unwrap().max_abs();
        assert!(orth <= 1e-8, "orthonormality residual {orth}");
        let resid = e.reconstruct().sub(m).unwrap().max_abs();
        assert!(resid <= 1e-8 * (1.0 + m.max_abs()), "reconstruction residual {resid}");
        for w in e.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn covariance_two_points() {
        let c = covariance(&[vec![0.0f64], vec![2.0]], Denominator::Population).unwrap();
        assert_eq!(c.as_slice(), &[1.0]);
        let c = covariance(&[vec![0.0f64], vec![2.0]], Denominator::Sample).unwrap();
        assert_eq!(c.as_slice(), &[2.0]);
    }

    #[test]
    fn covariance_identical_samples_is_zero() {
        let s = vec![vec![0.3f64, -1.0, 2.0]; 5];
        let c = covariance(&s, Denominator::Population).unwrap();
        assert!(c.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn covariance_matches_direct_formula() {
        let mut rng = RngStream::new(11, "cov");
        let samples: Vec<Vec<f64>> =
            (0..50).map(|_| (0..3).map(|_| rng.standard_normal() * 2.0 + 1.0).collect()).collect();
        let c = covariance(&samples, Denominator::Population).unwrap();
        let n = samples.len() as f64;
        let mu: Vec<f64> = (0..3).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
        for i in 0..3 {
            for j in 0..3 {
                let direct: f64 =
                    samples.iter().map(|s| (s[i] - mu[i]) * (s[j] - mu[j])).sum::<f64>() / n;
                assert!((c[(i, j)] - direct).abs() < 1e-12);
            }
        }
        let min_eig = *sym_eig(&c).unwrap().eigenvalues.last().unwrap();
        assert!(min_eig >= -1e-10 * c.trace());
    }

    #[test]
    fn covariance_errors() {
        assert!(matches!(
            covariance(&[vec![1.0f64]], Denominator::Population),
            Err(Error::NotEnoughSamples { .. })
        ));
        assert!(matches!(
            covariance(&[vec![1.0f64], vec![1.0, 2.0]], Denominator::Population),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn eig_identity() {
        let m = Matrix::<f64>::identity(3);
        let e = sym_eig(&m).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        check_invariants(&m, &e);
    }

    #[test]
    fn eig_diagonal() {
        let m = Matrix::from_diagonal(&[1.0f64, 3.0]);
        let e = sym_eig(&m).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(e.eigenvectors.column(0).iter().map(|x| x.abs()).collect::<Vec<_>>(), vec![0.0, 1.0]);
        assert_eq!(e.eigenvectors.column(1).iter().map(|x| x.abs()).collect::<Vec<_>>(), vec![1.0, 0.0]);
    }

    #[test]
    fn eig_random_8x8() {
        let m = seeded_symmetric(8, 5);
        let e = sym_eig(&m).unwrap();
        check_invariants(&m, &e);
    }

    #[test]
    fn eig_f32() {
        let m = seeded_symmetric(6, 9).map(|x| x as f32);
        let e = sym_eig(&m).unwrap();
        let resid = e.reconstruct().sub(&m).unwrap().max_abs();
        assert!(resid < 1e-5);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0f64, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&m), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn pmat_round_trip_and_layout() {
        let m = Matrix::from_rows(&[vec![1.0f64, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"PMAT");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 13 + 6 * 8);
        assert_eq!(Matrix::<f64>::from_bytes(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Matrix::<f64>::from_bytes(&bad).is_err());
        assert!(Matrix::<f64>::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn gaussian_zero_sigma_is_zero() {
        let mut rng = RngStream::new(1, "g");
        let e = sample_anisotropic_gaussian(&Matrix::<f64>::identity(4), &[0.0; 4], &mut rng).unwrap();
        assert_eq!(e, vec![0.0; 4]);
    }

    #[test]
    fn gaussian_rejects_negative_sigma() {
        let mut rng = RngStream::new(1, "g");
        assert!(sample_anisotropic_gaussian(&Matrix::<f64>::identity(2), &[1.0, -1.0], &mut rng).is_err());
    }

    #[test]
    fn gaussian_axis_variances() {
        let mut rng = RngStream::new(2, "axis");
        let n = 100_000;
        let u = Matrix::<f64>::identity(2);
        let draws: Vec<Vec<f64>> =
            (0..n).map(|_| sample_anisotropic_gaussian(&u, &[4.0, 0.0], &mut rng).unwrap()).collect();
        assert!(draws.iter().all(|d| d[1] == 0.0));
        let mean = draws.iter().map(|d| d[0]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d[0] - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 4.0).abs() / 4.0 < 0.05, "variance {var}");
        assert!(mean.abs() <= 4.0 * (4.0f64 / n as f64).sqrt());
    }
}
