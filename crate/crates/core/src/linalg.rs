//! Dense row-major matrices and the handful of small-matrix factorizations
//! the solvers need (everything r×r is tiny; only products touch n×n data).

use std::ops::{Index, IndexMut};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diagonal(values: &[T]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// `a bᵀ`
    pub fn outer(a: &[T], b: &[T]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn row_chunks(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        self.row_chunks().map(<[T]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_symmetric(&self) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| self[(i, j)] == self[(j, i)]))
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self ← (1-γ) new + γ self`
    pub fn damp_towards(&mut self, new: &Self, damping: T) {
        let keep = T::one() - damping;
        for (x, &y) in self.data.iter_mut().zip(&new.data) {
            *x = keep * y + damping * *x;
        }
    }

    pub fn symmetrized(&self) -> Self {
        let half = T::lit(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| half * (self[(i, j)] + self[(j, i)]))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · v`
    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matrix-vector shape mismatch");
        self.row_chunks()
            .map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ · other`, the r×r Gram-type product of two tall matrices.
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Self::zeros(self.cols, other.cols);
        for (a, b) in self.row_chunks().zip(other.row_chunks()) {
            for (i, &ai) in a.iter().enumerate() {
                for (j, &bj) in b.iter().enumerate() {
                    out.data[i * other.cols + j] += ai * bj;
                }
            }
        }
        out
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl<T: Scalar> Matrix<T> {
    /// Dense product `self · tall` for an n×n (or n×m) `self` and a tall
    /// m×r `tall`, parallel over output rows. Row results do not depend on
    /// how rows are scheduled.
    pub fn mul_tall(&self, tall: &Self) -> Self {
        assert_eq!(self.cols, tall.rows, "mul_tall shape mismatch");
        let r = tall.cols;
        let mut out = Self::zeros(self.rows, r);
        if r == 0 {
            return out;
        }
        out.data
            .par_chunks_mut(r)
            .zip(self.data.par_chunks(self.cols.max(1)))
            .for_each(|(acc, srow)| {
                for (&s, trow) in srow.iter().zip(tall.row_chunks()) {
                    for (a, &t) in acc.iter_mut().zip(trow) {
                        *a += s * t;
                    }
                }
            });
        out
    }

    /// `selfᵀ · tall` for an n×m `self` and n×r `tall` (m×r result), computed
    /// with a fixed-order reduction.
    pub fn t_mul_tall(&self, tall: &Self) -> Self {
        assert_eq!(self.rows, tall.rows, "t_mul_tall shape mismatch");
        let r = tall.cols;
        let m = self.cols;
        // Column blocks are independent; each accumulates over all rows in order.
        let mut out = Self::zeros(m, r);
        const BLOCK: usize = 64;
        out.data
            .par_chunks_mut(BLOCK * r.max(1))
            .enumerate()
            .for_each(|(b, chunk)| {
                let j0 = b * BLOCK;
                let width = chunk.len() / r.max(1);
                for (srow, trow) in self.row_chunks().zip(tall.row_chunks()) {
                    for jj in 0..width {
                        let s = srow[j0 + jj];
                        let acc = &mut chunk[jj * r..(jj + 1) * r];
                        for (a, &t) in acc.iter_mut().zip(trow) {
                            *a += s * t;
                        }
                    }
                }
            });
        out
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Eigendecomposition of a small symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in ascending order and the eigenvectors as columns.
pub fn sym_eigen<T: Scalar>(a: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
    assert!(a.is_square(), "sym_eigen needs a square matrix");
    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let scale: T = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum::<T>() + off;
        if off <= eps * eps * scale || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

/// Symmetric square root `L` with `L L = a` for a PSD matrix. Eigenvalues
/// in `[-tol, 0)` are treated as rounding noise and clamped to zero.
pub fn psd_sqrt<T: Scalar>(a: &Matrix<T>, tol: T) -> Result<Matrix<T>> {
    let (values, vectors) = sym_eigen(a);
    let n = a.rows();
    // Eigenvalues at the rounding level of the largest one are zero; their
    // square roots would otherwise inject O(√ε) noise.
    let top = values.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let floor = T::epsilon() * T::from_usize_lossy(4 * n.max(1)) * top;
    let mut roots = Vec::with_capacity(n);
    for &lambda in &values {
        if lambda < -tol {
            return Err(Error::NotPsd {
                eigenvalue: lambda.as_f64(),
            });
        }
        roots.push(if lambda <= floor { T::zero() } else { lambda.sqrt() });
    }
    Ok(Matrix::from_fn(n, n, |i, j| {
        (0..n).map(|k| vectors[(i, k)] * roots[k] * vectors[(j, k)]).sum()
    }))
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    assert!(a.is_square());
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= T::zero() || !d.is_finite() {
            return Err(Error::Domain(format!(
                "matrix is not positive definite (pivot {j} = {d})"
            )));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Inverse and log-determinant of an SPD matrix via its Cholesky factor.
pub fn spd_inverse<T: Scalar>(a: &Matrix<T>) -> Result<(Matrix<T>, T)> {
    let l = cholesky(a)?;
    let n = a.rows();
    let log_det = T::lit(2.0) * (0..n).map(|i| l[(i, i)].ln()).sum::<T>();
    // Solve L Lᵀ X = I column by column.
    let mut inv = Matrix::zeros(n, n);
    for c in 0..n {
        let mut y = vec![T::zero(); n];
        for i in 0..n {
            let mut s = if i == c { T::one() } else { T::zero() };
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)] * inv[(k, c)];
            }
            inv[(i, c)] = s / l[(i, i)];
        }
    }
    Ok((inv.symmetrized(), log_det))
}

/// Numerically stable `log Σ exp(x_k)`.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_reconstructs_matrix() {
        let a = Matrix::from_rows(&[
            vec![4.0, 1.0, -2.0],
            vec![1.0, 3.0, 0.5],
            vec![-2.0, 0.5, 1.0],
        ])
        .unwrap();
        let (vals, vecs) = sym_eigen(&a);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let recon = vecs.matmul(&Matrix::diagonal(&vals)).matmul(&vecs.transpose());
        assert!(recon.max_abs_diff(&a) < 1e-12);
        let ortho = vecs.transpose().matmul(&vecs);
        assert!(ortho.max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn psd_sqrt_squares_back_and_rejects_negative() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let l = psd_sqrt(&a, 1e-10).unwrap();
        assert!(l.matmul(&l).max_abs_diff(&a) < 1e-12);
        let rank_one = Matrix::filled(2, 2, 1.0);
        let l = psd_sqrt(&rank_one, 1e-10).unwrap();
        assert!(l.matmul(&l).max_abs_diff(&rank_one) < 1e-12);
        let bad = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(psd_sqrt(&bad, 1e-10), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn spd_inverse_and_log_det() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let (inv, log_det) = spd_inverse(&a).unwrap();
        assert!(a.matmul(&inv).max_abs_diff(&Matrix::identity(2)) < 1e-12);
        assert!((log_det - 8f64.ln()).abs() < 1e-12);
        assert!(cholesky(&Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap()).is_err());
    }

    #[test]
    fn tall_products_match_naive() {
        let s = Matrix::from_fn(7, 5, |i, j| ((i * 5 + j) as f64).sin());
        let t = Matrix::from_fn(5, 3, |i, j| ((i + 2 * j) as f64).cos());
        assert!(s.mul_tall(&t).max_abs_diff(&s.matmul(&t)) < 1e-14);
        let u = Matrix::from_fn(7, 3, |i, j| (i as f64) - (j as f64));
        assert!(s.t_mul_tall(&u).max_abs_diff(&s.transpose().matmul(&u)) < 1e-13);
        assert!(u.t_matmul(&u).max_abs_diff(&u.transpose().matmul(&u)) < 1e-13);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp::<f64>(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
