//! Planted instances of the `X K Xᵀ` and `U Vᵀ` models and the metrics
//! used to score estimates against them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{Channel, ScoreMatrix};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::priors::Prior;
use crate::rng::stream;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    /// `W = X K Xᵀ / √n`, symmetric observations.
    Xkx,
    /// `W = U Vᵀ / √n`, rectangular observations.
    Uv,
}

/// Planted factors: `left` is `X` (or `U`); `right` is `V` for the UV model.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth<T> {
    pub left: Matrix<T>,
    pub right: Option<Matrix<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedInstance<T: Scalar> {
    pub model: Model,
    pub n: usize,
    /// Column count of the observations (`n` for the XKX model).
    pub m: usize,
    pub rank: usize,
    pub coupling: Option<Matrix<T>>,
    pub truth: Option<GroundTruth<T>>,
    pub observations: Matrix<T>,
    pub scores: ScoreMatrix<T>,
    pub delta: T,
    pub seed: u64,
    pub channel: Channel<T>,
    pub prior: Prior<T>,
    pub prior_v: Option<Prior<T>>,
}

impl<T: Scalar> PlantedInstance<T> {
    /// The same instance with the planted factors removed.
    pub fn blind(&self) -> Self {
        Self {
            truth: None,
            ..self.clone()
        }
    }

    pub fn alpha(&self) -> T {
        T::from_usize_lossy(self.m) / T::from_usize_lossy(self.n)
    }
}

fn sample_rows<T: Scalar>(prior: &Prior<T>, rows: usize, seed: u64, tag: &str) -> Matrix<T> {
    let mut rng = stream(seed, tag, 0);
    let r = prior.rank();
    let mut x = Matrix::zeros(rows, r);
    for i in 0..rows {
        let row = prior.sample(&mut rng);
        x.row_mut(i).copy_from_slice(&row);
    }
    x
}

fn check_coupling<T: Scalar>(k: &Matrix<T>, r: usize) -> Result<()> {
    if k.shape() != (r, r) {
        return Err(Error::Shape(format!(
            "coupling matrix is {:?} but prior rank is {r}",
            k.shape()
        )));
    }
    if !k.is_symmetric() {
        return Err(Error::param("coupling", "K must be symmetric"));
    }
    Ok(())
}

/// Draws `X` from the prior and `Y_ij ~ P_out(·|x_iᵀ K x_j/√n)` for
/// `i ≤ j`, mirrored below the diagonal.
pub fn generate_xkx<T: Scalar>(
    prior: &Prior<T>,
    channel: &Channel<T>,
    coupling: &Matrix<T>,
    n: usize,
    seed: u64,
) -> Result<PlantedInstance<T>> {
    if n < 2 {
        return Err(Error::param("n", "need at least two rows"));
    }
    prior.validate()?;
    channel.validate()?;
    let r = prior.rank();
    check_coupling(coupling, r)?;

    let x = sample_rows(prior, n, seed, "prior");
    // x_i K, so w_ij = (x_i K) · x_j / √n
    let xk = x.matmul(coupling);
    let inv_sqrt_n = T::one() / T::from_usize_lossy(n).sqrt();

    // Each row i owns the upper-triangle entries j >= i and its own stream.
    let upper: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "noise", i as u64);
            let xi = xk.row(i);
            (i..n)
                .map(|j| channel.sample(dot(xi, x.row(j)) * inv_sqrt_n, &mut rng))
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<_>>()?;

    let mut y = Matrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            y[(i, i + off)] = v;
            y[(i + off, i)] = v;
        }
    }
    let scores = channel.score_matrix(&y)?;
    Ok(PlantedInstance {
        model: Model::Xkx,
        n,
        m: n,
        rank: r,
        coupling: Some(coupling.clone()),
        truth: Some(GroundTruth { left: x, right: None }),
        observations: y,
        scores,
        delta: channel.inverse_fisher(),
        seed,
        channel: *channel,
        prior: prior.clone(),
        prior_v: None,
    })
}

/// Draws `U` (n×r), `V` (m×r, `m = round(alpha n)`) and `Y_ij ~ P_out(·|u_iᵀv_j/√n)`.
pub fn generate_uv<T: Scalar>(
    prior_u: &Prior<T>,
    prior_v: &Prior<T>,
    channel: &Channel<T>,
    n: usize,
    alpha: T,
    seed: u64,
) -> Result<PlantedInstance<T>> {
    if n < 2 {
        return Err(Error::param("n", "need at least two rows"));
    }
    if !(alpha > T::zero()) {
        return Err(Error::param("alpha", "must be positive"));
    }
    let m = (alpha * T::from_usize_lossy(n)).round().to_usize().unwrap_or(0);
    if m < 1 {
        return Err(Error::param("alpha", format!("round(alpha*n) = {m} leaves no columns")));
    }
    prior_u.validate()?;
    prior_v.validate()?;
    channel.validate()?;
    let r = prior_u.rank();
    if prior_v.rank() != r {
        return Err(Error::Shape(format!(
            "prior ranks differ: {} vs {}",
            r,
            prior_v.rank()
        )));
    }
    let u = sample_rows(prior_u, n, seed, "prior_u");
    let v = sample_rows(prior_v, m, seed, "prior_v");
    let inv_sqrt_n = T::one() / T::from_usize_lossy(n).sqrt();

    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "noise", i as u64);
            let ui = u.row(i);
            (0..m)
                .map(|j| channel.sample(dot(ui, v.row(j)) * inv_sqrt_n, &mut rng))
                .collect::<Result<Vec<T>>>()
        })
        .collect::<Result<_>>()?;
    let y = Matrix::from_vec(n, m, rows.into_iter().flatten().collect())?;
    let mut scores = channel.score_matrix(&y)?;
    scores.symmetric = false;
    Ok(PlantedInstance {
        model: Model::Uv,
        n,
        m,
        rank: r,
        coupling: None,
        truth: Some(GroundTruth {
            left: u,
            right: Some(v),
        }),
        observations: y,
        scores,
        delta: channel.inverse_fisher(),
        seed,
        channel: *channel,
        prior: prior_u.clone(),
        prior_v: Some(prior_v.clone()),
    })
}

fn same_shape<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "estimate is {:?} but truth is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(1/n) Σ_i ‖x_i − â_i‖²`
pub fn mse<T: Scalar>(estimate: &Matrix<T>, truth: &Matrix<T>) -> Result<T> {
    same_shape(estimate, truth)?;
    let n = T::from_usize_lossy(truth.rows().max(1));
    Ok(estimate.sub(truth).frobenius_sq() / n)
}

/// `Q̂ = (1/n) Σ a_i a_iᵀ` and `M̂ = (1/n) Σ a_i x_iᵀ`.
pub fn order_parameters<T: Scalar>(
    estimate: &Matrix<T>,
    truth: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    same_shape(estimate, truth)?;
    let inv_n = T::one() / T::from_usize_lossy(truth.rows().max(1));
    Ok((
        estimate.t_matmul(estimate).scale(inv_n),
        estimate.t_matmul(truth).scale(inv_n),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap<T> {
    /// Fraction of correctly assigned rows under the best label matching.
    pub overlap: T,
    /// True when the matching was found greedily (more than 10 groups).
    pub greedy: bool,
}

/// Largest group count aligned by exhaustive search over permutations.
pub const EXHAUSTIVE_ALIGNMENT_LIMIT: usize = 10;

fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// `C[a][b]` = number of rows whose estimate's argmax is `a` and truth's is `b`.
fn confusion<T: Scalar>(estimate: &Matrix<T>, truth: &Matrix<T>, r: usize) -> Vec<Vec<usize>> {
    let mut c = vec![vec![0usize; r]; r];
    for (e, t) in estimate.row_chunks().zip(truth.row_chunks()) {
        c[argmax(e)][argmax(t)] += 1;
    }
    c
}

/// Best permutation `π` maximizing `Σ_a C[a][π(a)]`, and whether it was found greedily.
fn best_matching(c: &[Vec<usize>]) -> (Vec<usize>, bool) {
    let r = c.len();
    if r <= EXHAUSTIVE_ALIGNMENT_LIMIT {
        // Heap's algorithm over all r! assignments.
        let mut perm: Vec<usize> = (0..r).collect();
        let score = |p: &[usize]| p.iter().enumerate().map(|(a, &b)| c[a][b]).sum::<usize>();
        let mut best = perm.clone();
        let mut best_score = score(&perm);
        let mut counters = vec![0usize; r];
        let mut i = 1;
        while i < r {
            if counters[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(counters[i], i);
                }
                let s = score(&perm);
                if s > best_score {
                    best_score = s;
                    best.copy_from_slice(&perm);
                }
                counters[i] += 1;
                i = 1;
            } else {
                counters[i] = 0;
                i += 1;
            }
        }
        (best, false)
    } else {
        // Largest remaining confusion entry first.
        let mut entries: Vec<(usize, usize, usize)> = (0..r)
            .flat_map(|a| (0..r).map(move |b| (a, b)))
            .map(|(a, b)| (c[a][b], a, b))
            .collect();
        entries.sort_by(|x, y| y.cmp(x));
        let mut perm = vec![usize::MAX; r];
        let mut used = vec![false; r];
        for (_, a, b) in entries {
            if perm[a] == usize::MAX && !used[b] {
                perm[a] = b;
                used[b] = true;
            }
        }
        (perm, true)
    }
}

/// Fraction of rows whose argmax label agrees with the truth after the
/// best relabeling of the estimated groups.
pub fn community_overlap<T: Scalar>(
    estimate: &Matrix<T>,
    truth: &Matrix<T>,
    r: usize,
) -> Result<Overlap<T>> {
    same_shape(estimate, truth)?;
    if truth.cols() != r {
        return Err(Error::Shape(format!("expected {r} columns, got {}", truth.cols())));
    }
    let c = confusion(estimate, truth, r);
    let (perm, greedy) = best_matching(&c);
    let hits: usize = perm.iter().enumerate().map(|(a, &b)| c[a][b]).sum();
    Ok(Overlap {
        overlap: T::from_usize_lossy(hits) / T::from_usize_lossy(truth.rows().max(1)),
        greedy,
    })
}

/// Reorders the estimate's columns by the label matching that maximizes
/// agreement with the truth, so label-symmetric estimates can be scored.
pub fn align_communities<T: Scalar>(estimate: &Matrix<T>, truth: &Matrix<T>) -> Result<Matrix<T>> {
    same_shape(estimate, truth)?;
    let r = truth.cols();
    let (perm, _) = best_matching(&confusion(estimate, truth, r));
    // estimated label a plays the role of true label perm[a]
    let mut out = Matrix::zeros(estimate.rows(), r);
    for i in 0..estimate.rows() {
        for (a, &b) in perm.iter().enumerate() {
            out[(i, b)] = estimate[(i, a)];
        }
    }
    Ok(out)
}

/// Flips the sign of estimate columns that correlate negatively with the
/// truth (the sign symmetry of zero-mean priors).
pub fn align_signs<T: Scalar>(estimate: &Matrix<T>, truth: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    same_shape(estimate, truth)?;
    let r = truth.cols();
    let signs: Vec<T> = (0..r)
        .map(|k| {
            let c: T = estimate
                .row_chunks()
                .zip(truth.row_chunks())
                .map(|(e, t)| e[k] * t[k])
                .sum();
            if c < T::zero() {
                -T::one()
            } else {
                T::one()
            }
        })
        .collect();
    let out = Matrix::from_fn(estimate.rows(), r, |i, k| estimate[(i, k)] * signs[k]);
    Ok((out, signs))
}
