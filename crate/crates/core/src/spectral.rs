//! Spectral baseline: leading eigenvectors of the score matrix `S/√n`
//! (singular vectors for rectangular observations), compared against the
//! same computation on the raw observations `Y/√n`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{Model, PlantedInstance};
use crate::linalg::{dot, norm, Matrix};
use crate::rng::{standard_normal, stream};
use crate::Scalar;

/// Largest number of eigenpairs computed by deflation.
pub const MAX_PAIRS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerOptions<T> {
    /// Converged once successive Rayleigh quotients differ by less than
    /// `tol · max(|λ₁|, |λ|)` and the residual `‖Av − λv‖` is within ten
    /// times that (`λ₁` is the leading eigenvalue).
    pub tol: T,
    pub max_iter: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for PowerOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-10),
            max_iter: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eigenpair<T> {
    pub value: T,
    /// Unit norm, first nonzero coordinate positive.
    pub vector: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: T,
}

fn orthogonalize<T: Scalar>(v: &mut [T], basis: &[Eigenpair<T>]) {
    // two passes keep the result orthogonal to rounding level
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, &b.vector);
            for (x, &y) in v.iter_mut().zip(&b.vector) {
                *x -= c * y;
            }
        }
    }
}

fn normalize<T: Scalar>(v: &mut [T]) -> T {
    let nv = norm(v);
    if nv > T::zero() {
        for x in v.iter_mut() {
            *x /= nv;
        }
    }
    nv
}

fn fix_sign<T: Scalar>(v: &mut [T]) {
    if let Some(&first) = v.iter().find(|&&x| x != T::zero()) {
        if first < T::zero() {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
}

/// Power iteration with deflation on a symmetric linear operator of
/// dimension `dim`. Pairs come out by decreasing `|λ|`.
pub fn top_eigvecs_op<T: Scalar>(
    dim: usize,
    apply: impl Fn(&[T]) -> Vec<T>,
    k: usize,
    opts: &PowerOptions<T>,
) -> Result<Vec<Eigenpair<T>>> {
    if k == 0 || k > MAX_PAIRS || k > dim {
        return Err(Error::param("k", format!("need 1 <= k <= min({MAX_PAIRS}, dimension)")));
    }
    if !(opts.tol > T::zero()) || opts.max_iter == 0 {
        return Err(Error::param("tol", "need tol > 0 and max_iter >= 1"));
    }
    let mut found: Vec<Eigenpair<T>> = Vec::with_capacity(k);
    for index in 0..k {
        let mut rng = stream(opts.seed, "power", index as u64);
        let mut v: Vec<T> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
        orthogonalize(&mut v, &found);
        normalize(&mut v);
        let mut lambda = T::zero();
        let mut converged = false;
        let mut iterations = 0;
        let mut residual = T::infinity();
        while iterations < opts.max_iter {
            iterations += 1;
            let mut w = apply(&v);
            orthogonalize(&mut w, &found);
            let next = dot(&v, &w);
            residual = w
                .iter()
                .zip(&v)
                .map(|(&a, &b)| (a - next * b) * (a - next * b))
                .sum::<T>()
                .sqrt();
            // relative to the spectrum's scale so that c·A and A take the same path
            let scale = found.first().map_or(next.abs(), |p| p.value.abs()).max(next.abs());
            let settled = (next - lambda).abs() < opts.tol * scale
                && residual <= T::lit(10.0) * opts.tol * scale;
            lambda = next;
            if settled {
                converged = true;
                break;
            }
            if normalize(&mut w) == T::zero() {
                // v spans a null direction of the deflated operator
                converged = true;
                residual = T::zero();
                break;
            }
            v = w;
        }
        fix_sign(&mut v);
        found.push(Eigenpair {
            value: lambda,
            vector: v,
            converged,
            iterations,
            residual,
        });
    }
    Ok(found)
}

/// Leading `k` eigenpairs of a symmetric matrix.
pub fn top_eigvecs<T: Scalar>(matrix: &Matrix<T>, k: usize, opts: &PowerOptions<T>) -> Result<Vec<Eigenpair<T>>> {
    if !matrix.is_square() {
        return Err(Error::Shape(format!("matrix is {:?}, expected square", matrix.shape())));
    }
    if !matrix.is_symmetric() {
        return Err(Error::param("matrix", "must be symmetric"));
    }
    top_eigvecs_op(matrix.rows(), |v| par_mul_vec(matrix, v, T::one()), k, opts)
}

fn par_mul_vec<T: Scalar>(m: &Matrix<T>, v: &[T], scale: T) -> Vec<T> {
    (0..m.rows())
        .into_par_iter()
        .map(|i| dot(m.row(i), v) * scale)
        .collect()
}

fn par_t_mul_vec<T: Scalar>(m: &Matrix<T>, v: &[T], scale: T) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for (row, &c) in m.row_chunks().zip(v) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += c * x;
        }
    }
    out.iter_mut().for_each(|o| *o *= scale);
    out
}

/// Leading left singular vectors of a rectangular `matrix/√n`, as
/// eigenpairs of `M Mᵀ/n` with the eigenvalue replaced by the singular value.
pub fn top_left_singular<T: Scalar>(matrix: &Matrix<T>, k: usize, opts: &PowerOptions<T>) -> Result<Vec<Eigenpair<T>>> {
    let inv_n = T::one() / T::from_usize_lossy(matrix.rows());
    let mut pairs = top_eigvecs_op(
        matrix.rows(),
        |v| par_mul_vec(matrix, &par_t_mul_vec(matrix, v, T::one()), inv_n),
        k,
        opts,
    )?;
    for p in &mut pairs {
        p.value = p.value.max(T::zero()).sqrt();
    }
    Ok(pairs)
}

/// Length of the projection of the unit vector `v` onto the column span
/// of `truth`. For a single column this is `|⟨v, x⟩|/(‖v‖‖x‖)`.
pub fn subspace_overlap<T: Scalar>(v: &[T], truth: &Matrix<T>) -> Result<T> {
    if v.len() != truth.rows() {
        return Err(Error::Shape(format!(
            "vector of length {} against {} truth rows",
            v.len(),
            truth.rows()
        )));
    }
    // Gram-Schmidt on the truth columns
    let mut basis: Vec<Vec<T>> = Vec::new();
    for c in 0..truth.cols() {
        let mut col = truth.column(c);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&col, b);
                for (x, &y) in col.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let nc = norm(&col);
        if nc > T::epsilon() * T::from_usize_lossy(truth.rows()) {
            col.iter_mut().for_each(|x| *x /= nc);
            basis.push(col);
        }
    }
    let nv = norm(v);
    if nv == T::zero() {
        return Ok(T::zero());
    }
    Ok(basis.iter().map(|b| dot(v, b).powi(2)).sum::<T>().sqrt() / nv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    S,
    Y,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralRow<T> {
    pub matrix_kind: MatrixKind,
    pub index: usize,
    pub eigenvalue: T,
    pub overlap: T,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport<T> {
    pub rows: Vec<SpectralRow<T>>,
}

impl<T: Scalar> SpectralReport<T> {
    pub fn best_overlap(&self, kind: MatrixKind) -> T {
        self.rows
            .iter()
            .filter(|r| r.matrix_kind == kind)
            .fold(T::zero(), |m, r| m.max(r.overlap))
    }
}

/// Top-`k` eigenvectors of `S/√n` and `Y/√n` (left singular vectors for UV
/// instances) and their overlaps with the planted `X` (or `U`).
pub fn spectral_compare<T: Scalar>(
    instance: &PlantedInstance<T>,
    k: usize,
    opts: &PowerOptions<T>,
) -> Result<SpectralReport<T>> {
    let truth = &instance
        .truth
        .as_ref()
        .ok_or_else(|| Error::param("instance", "spectral comparison needs the planted factors"))?
        .left;
    let inv_sqrt_n = T::one() / T::from_usize_lossy(instance.n).sqrt();
    let mut rows = Vec::new();
    for (kind, m) in [
        (MatrixKind::S, &instance.scores.values),
        (MatrixKind::Y, &instance.observations),
    ] {
        let pairs = match instance.model {
            Model::Xkx => top_eigvecs_op(m.rows(), |v| par_mul_vec(m, v, inv_sqrt_n), k, opts)?,
            Model::Uv => top_left_singular(m, k, opts)?,
        };
        for (index, p) in pairs.into_iter().enumerate() {
            rows.push(SpectralRow {
                matrix_kind: kind,
                index,
                eigenvalue: p.value,
                overlap: subspace_overlap(&p.vector, truth)?,
                converged: p.converged,
            });
        }
    }
    Ok(SpectralReport { rows })
}
