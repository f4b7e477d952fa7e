//! State evolution: the deterministic recursions on the r×r order
//! parameters `Q` (self-overlap) and `M` (overlap with the truth) that
//! track AMP as `n → ∞`, and the corresponding free energies.
//!
//! Gaussian expectations are evaluated on a frozen [`SampleBank`] so the
//! SE map is deterministic across iterations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, sym_eigen, Matrix};
use crate::priors::Prior;
use crate::rng::{standard_normal, stream};
use crate::Scalar;

/// Largest rank for which the tensor Gauss-Hermite rule is offered.
pub const GAUSS_HERMITE_MAX_RANK: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Quadrature {
    MonteCarlo { samples: usize },
    /// Tensor-product rule with `nodes` points per Gaussian dimension.
    GaussHermite { nodes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureSpec {
    pub rule: Quadrature,
    pub seed: u64,
    /// Redraw the Monte Carlo bank at every iteration instead of reusing
    /// one frozen bank (for error bars; makes the map stochastic).
    pub fresh_noise: bool,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            rule: Quadrature::MonteCarlo { samples: 100_000 },
            seed: 0,
            fresh_noise: false,
        }
    }
}

impl QuadratureSpec {
    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        Self {
            rule: Quadrature::MonteCarlo { samples },
            seed,
            fresh_noise: false,
        }
    }

    pub fn gauss_hermite(nodes: usize) -> Self {
        Self {
            rule: Quadrature::GaussHermite { nodes },
            seed: 0,
            fresh_noise: false,
        }
    }

    pub fn validate(&self, r: usize) -> Result<()> {
        match self.rule {
            Quadrature::MonteCarlo { samples } if samples < 2 => {
                Err(Error::param("samples", "need at least two Monte Carlo samples"))
            }
            Quadrature::GaussHermite { nodes } if nodes < 1 => {
                Err(Error::param("nodes", "need at least one node"))
            }
            Quadrature::GaussHermite { .. } if r > GAUSS_HERMITE_MAX_RANK => Err(Error::param(
                "method",
                format!("gauss-hermite is limited to rank {GAUSS_HERMITE_MAX_RANK}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Nodes and weights of the `k`-point Gauss-Hermite rule for the standard
/// normal weight (Golub-Welsch); weights sum to one.
pub fn gauss_hermite_rule<T: Scalar>(k: usize) -> (Vec<T>, Vec<T>) {
    let jacobi = Matrix::from_fn(k, k, |i, j| {
        if i + 1 == j || j + 1 == i {
            T::from_usize_lossy(i.max(j)).sqrt()
        } else {
            T::zero()
        }
    });
    let (nodes, vecs) = sym_eigen(&jacobi);
    let weights = (0..k).map(|c| vecs[(0, c)] * vecs[(0, c)]).collect();
    (nodes, weights)
}

fn tensor_grid<T: Scalar>(nodes: &[T], weights: &[T], dim: usize) -> Vec<(T, Vec<T>)> {
    let mut out = vec![(T::one(), Vec::new())];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|(w, p)| {
                nodes.iter().zip(weights).map(move |(&x, &wx)| {
                    let mut q = p.clone();
                    q.push(x);
                    (w * wx, q)
                })
            })
            .collect();
    }
    out
}

/// Joint draws of a prior vector `x` and a standard normal `z`, with weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBank<T> {
    pub x: Matrix<T>,
    pub z: Matrix<T>,
    pub weights: Vec<T>,
    /// Equal weights from random draws (standard errors are meaningful).
    pub monte_carlo: bool,
}

impl<T: Scalar> SampleBank<T> {
    /// Builds the bank for `prior`. `index` selects an independent Monte
    /// Carlo stream (iteration number in fresh-noise mode).
    pub fn build(prior: &Prior<T>, spec: &QuadratureSpec, tag: &str, index: u64) -> Result<Self> {
        let r = prior.rank();
        spec.validate(r)?;
        match spec.rule {
            Quadrature::MonteCarlo { samples } => {
                let mut rng = stream(spec.seed, tag, index);
                let mut x = Matrix::zeros(samples, r);
                let mut z = Matrix::zeros(samples, r);
                for i in 0..samples {
                    x.row_mut(i).copy_from_slice(&prior.sample(&mut rng));
                    for v in z.row_mut(i) {
                        *v = standard_normal(&mut rng);
                    }
                }
                let w = T::one() / T::from_usize_lossy(samples);
                Ok(Self {
                    x,
                    z,
                    weights: vec![w; samples],
                    monte_carlo: true,
                })
            }
            Quadrature::GaussHermite { nodes } => {
                let (gx, gw) = gauss_hermite_rule::<T>(nodes);
                let zs = tensor_grid(&gx, &gw, r);
                let xs: Vec<(T, Vec<T>)> = match prior {
                    Prior::Gaussian(g) => tensor_grid(&gx, &gw, r)
                        .into_iter()
                        .map(|(w, zeta)| {
                            let d = g.covariance_factor().mul_vec(&zeta);
                            (w, g.mean().iter().zip(d).map(|(&m, e)| m + e).collect())
                        })
                        .collect(),
                    _ => prior.atoms().expect("non-gaussian priors are discrete"),
                };
                let total = xs.len() * zs.len();
                let mut x = Matrix::zeros(total, r);
                let mut z = Matrix::zeros(total, r);
                let mut weights = Vec::with_capacity(total);
                for (i, ((wx, xv), (wz, zv))) in xs
                    .iter()
                    .flat_map(|a| zs.iter().map(move |b| (a, b)))
                    .enumerate()
                {
                    x.row_mut(i).copy_from_slice(xv);
                    z.row_mut(i).copy_from_slice(zv);
                    weights.push(*wx * *wz);
                }
                Ok(Self {
                    x,
                    z,
                    weights,
                    monte_carlo: false,
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weighted mean of `f` over the bank and, for Monte Carlo banks, the
    /// standard error of each component (zero for deterministic rules).
    /// The reduction runs over fixed-size chunks in a fixed order.
    pub fn expect(
        &self,
        dim: usize,
        f: impl Fn(&[T], &[T]) -> Result<Vec<T>> + Sync,
    ) -> Result<(Vec<T>, Vec<T>)> {
        const CHUNK: usize = 2048;
        let partials: Vec<(Vec<T>, Vec<T>)> = (0..self.len().div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut s1 = vec![T::zero(); dim];
                let mut s2 = vec![T::zero(); dim];
                for i in c * CHUNK..((c + 1) * CHUNK).min(self.len()) {
                    let v = f(self.x.row(i), self.z.row(i))?;
                    let w = self.weights[i];
                    for k in 0..dim {
                        s1[k] += w * v[k];
                        s2[k] += w * v[k] * v[k];
                    }
                }
                Ok((s1, s2))
            })
            .collect::<Result<_>>()?;
        let mut mean = vec![T::zero(); dim];
        let mut second = vec![T::zero(); dim];
        for (s1, s2) in partials {
            for k in 0..dim {
                mean[k] += s1[k];
                second[k] += s2[k];
            }
        }
        let err = if self.monte_carlo {
            let n = T::from_usize_lossy(self.len());
            mean.iter()
                .zip(&second)
                .map(|(&m, &s)| ((s - m * m).max(T::zero()) * n / (n - T::one()) / n).sqrt())
                .collect()
        } else {
            vec![T::zero(); dim]
        };
        Ok((mean, err))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeState<T> {
    pub q: Matrix<T>,
    pub m: Matrix<T>,
    pub t: usize,
    /// Enforce `M = Q` (Nishimori) after every step.
    pub locked: bool,
}

impl<T: Scalar> SeState<T> {
    pub fn new(q: Matrix<T>, m: Matrix<T>) -> Self {
        Self {
            q,
            m,
            t: 0,
            locked: false,
        }
    }

    pub fn zero(r: usize) -> Self {
        Self::new(Matrix::zeros(r, r), Matrix::zeros(r, r))
    }

    /// `Q = M = E[x xᵀ]`, the state of an estimator that knows the truth.
    pub fn informative(prior: &Prior<T>) -> Self {
        let q = prior_second_moment_matrix(prior);
        Self::new(q.clone(), q)
    }

    /// The community family `Q = M = (a/r²) J + (b/r) I` with `a = 1 − b`.
    pub fn community(r: usize, b: T) -> Self {
        let q = community_matrix(r, b);
        Self::new(q.clone(), q)
    }

    pub fn nishimori_locked(mut self) -> Self {
        self.locked = true;
        self.m = self.q.clone();
        self
    }
}

/// `(a/r²) J + (b/r) I` with `a = 1 − b`.
pub fn community_matrix<T: Scalar>(r: usize, b: T) -> Matrix<T> {
    let rt = T::from_usize_lossy(r);
    let a = T::one() - b;
    Matrix::from_fn(r, r, |i, j| {
        a / (rt * rt) + if i == j { b / rt } else { T::zero() }
    })
}

/// Projection onto the community family: returns `(a, b)` from the mean
/// diagonal and mean off-diagonal entries.
pub fn community_coordinates<T: Scalar>(q: &Matrix<T>) -> (T, T) {
    let r = q.rows();
    let rt = T::from_usize_lossy(r);
    let diag = q.trace() / rt;
    let total: T = q.as_slice().iter().copied().sum();
    let off = if r > 1 {
        (total - q.trace()) / T::from_usize_lossy(r * (r - 1))
    } else {
        T::zero()
    };
    let b = rt * (diag - off);
    (off * rt * rt, b)
}

/// `E[x xᵀ]` under the prior.
pub fn prior_second_moment_matrix<T: Scalar>(prior: &Prior<T>) -> Matrix<T> {
    match prior {
        Prior::Gaussian(g) => {
            let mu = g.mean();
            g.covariance().add(&Matrix::outer(mu, mu))
        }
        Prior::Community { groups } => {
            Matrix::identity(*groups).scale(T::one() / T::from_usize_lossy(*groups))
        }
        Prior::Rademacher => Matrix::identity(1),
    }
}

/// `E‖x‖² − 2 tr M + tr Q`
pub fn se_mse<T: Scalar>(prior: &Prior<T>, q: &Matrix<T>, m: &Matrix<T>) -> T {
    prior.second_moment() - T::lit(2.0) * m.trace() + q.trace()
}

/// Tolerance under which negative eigenvalues of a noise covariance are
/// attributed to rounding.
fn psd_tol<T: Scalar>(a: &Matrix<T>) -> T {
    T::lit(1e-10).max(T::epsilon() * T::lit(64.0) * a.max_abs())
}

fn check_square<T: Scalar>(name: &str, a: &Matrix<T>, r: usize) -> Result<()> {
    if a.shape() != (r, r) {
        return Err(Error::Shape(format!("{name} is {:?}, expected {r}x{r}", a.shape())));
    }
    Ok(())
}

/// Standard errors attached to an SE update.
#[derive(Clone, Debug, PartialEq)]
pub struct SeStep<T> {
    pub state: SeState<T>,
    pub q_err: Matrix<T>,
    pub m_err: Matrix<T>,
}

/// One SE update `Q' = E[f fᵀ]`, `M' = E[f xᵀ]` with
/// `f = f(A, B)`, `A = KQK/Δ`, `B = KMKx/Δ + ξ`, `ξ ~ N(0, KQK/Δ)`.
pub fn se_step_xkx<T: Scalar>(
    state: &SeState<T>,
    prior: &Prior<T>,
    k: &Matrix<T>,
    delta: T,
    bank: &SampleBank<T>,
) -> Result<SeStep<T>> {
    let r = prior.rank();
    check_square("Q", &state.q, r)?;
    check_square("M", &state.m, r)?;
    check_square("K", k, r)?;
    if !(delta > T::zero()) {
        return Err(Error::param("delta", "must be positive"));
    }
    let (a, l, signal) = xkx_fields(state, k, delta)?;
    let (mean, err) = bank.expect(2 * r * r, |x, z| {
        let mut b = signal.mul_vec(x);
        for (bi, ni) in b.iter_mut().zip(l.mul_vec(z)) {
            *bi += ni;
        }
        let f = prior.denoise(&a, &b)?.mean;
        let mut out = Vec::with_capacity(2 * r * r);
        for i in 0..r {
            for j in 0..r {
                out.push(f[i] * f[j]);
            }
        }
        for i in 0..r {
            for j in 0..r {
                out.push(f[i] * x[j]);
            }
        }
        Ok(out)
    })?;
    let q = Matrix::from_vec(r, r, mean[..r * r].to_vec())?;
    let m = Matrix::from_vec(r, r, mean[r * r..].to_vec())?;
    let q_err = Matrix::from_vec(r, r, err[..r * r].to_vec())?;
    let m_err = Matrix::from_vec(r, r, err[r * r..].to_vec())?;
    let (q, m) = if state.locked {
        let avg = q.add(&m.symmetrized()).scale(T::lit(0.5));
        (avg.clone(), avg)
    } else {
        (q, m)
    };
    Ok(SeStep {
        state: SeState {
            q,
            m,
            t: state.t + 1,
            locked: state.locked,
        },
        q_err,
        m_err,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeFixedPoint<T> {
    pub state: SeState<T>,
    pub converged: bool,
    pub iterations: usize,
    /// `max |Q^{t+1} − Q^t|` at the last step.
    pub last_change: T,
}

/// Iterates [`se_step_xkx`] until `max |Q' − Q| < tol` or `t_max` steps.
pub fn se_fixed_point_xkx<T: Scalar>(
    prior: &Prior<T>,
    k: &Matrix<T>,
    delta: T,
    quad: &QuadratureSpec,
    init: SeState<T>,
    tol: T,
    t_max: usize,
) -> Result<SeFixedPoint<T>> {
    let mut bank = SampleBank::build(prior, quad, "se", 0)?;
    let mut state = init;
    let mut last_change = T::infinity();
    for t in 0..t_max {
        if quad.fresh_noise && t > 0 {
            bank = SampleBank::build(prior, quad, "se", t as u64)?;
        }
        let next = se_step_xkx(&state, prior, k, delta, &bank)?.state;
        if !next.q.all_finite() || !next.m.all_finite() {
            return Err(Error::Divergence {
                iteration: next.t,
                what: "non-finite order parameters".into(),
            });
        }
        last_change = next.q.max_abs_diff(&state.q);
        state = next;
        if last_change < tol {
            return Ok(SeFixedPoint {
                iterations: state.t,
                state,
                converged: true,
                last_change,
            });
        }
    }
    Ok(SeFixedPoint {
        iterations: state.t,
        state,
        converged: false,
        last_change,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergy<T> {
    pub value: T,
    /// Monte Carlo standard error (zero for deterministic rules).
    pub std_error: T,
}

/// `(A, √A, KMK/Δ)`: the denoiser's `A`, the noise factor and the signal map.
fn xkx_fields<T: Scalar>(
    state: &SeState<T>,
    k: &Matrix<T>,
    delta: T,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let a = k.matmul(&state.q).matmul(k).scale(T::one() / delta).symmetrized();
    let l = psd_sqrt(&a, psd_tol(&a))?;
    let signal = k.matmul(&state.m).matmul(k).scale(T::one() / delta);
    Ok((a, l, signal))
}

fn xkx_energy_terms<T: Scalar>(state: &SeState<T>, k: &Matrix<T>, delta: T) -> T {
    let kmk = k.matmul(&state.m).matmul(k);
    let kqk = k.matmul(&state.q).matmul(k);
    -kmk.matmul(&state.m.transpose()).trace() / (T::lit(2.0) * delta)
        + kqk.matmul(&state.q.transpose()).trace() / (T::lit(4.0) * delta)
}

/// `φ = E[log Z(KQK/Δ, KMKx/Δ + ξ)] − Tr(KMKMᵀ)/(2Δ) + Tr(KQKQᵀ)/(4Δ)`
pub fn se_free_energy_xkx<T: Scalar>(
    state: &SeState<T>,
    prior: &Prior<T>,
    k: &Matrix<T>,
    delta: T,
    bank: &SampleBank<T>,
) -> Result<FreeEnergy<T>> {
    let (a, l, signal) = xkx_fields(state, k, delta)?;
    let (mean, err) = bank.expect(1, |x, z| {
        let mut b = signal.mul_vec(x);
        for (bi, ni) in b.iter_mut().zip(l.mul_vec(z)) {
            *bi += ni;
        }
        Ok(vec![prior.denoise(&a, &b)?.log_z])
    })?;
    Ok(FreeEnergy {
        value: mean[0] + xkx_energy_terms(state, k, delta),
        std_error: err[0],
    })
}

/// `φ(s2) − φ(s1)` evaluated on one bank, with the standard error of the
/// paired difference (common random numbers make it much smaller than
/// the errors of the two terms).
pub fn se_free_energy_difference_xkx<T: Scalar>(
    s1: &SeState<T>,
    s2: &SeState<T>,
    prior: &Prior<T>,
    k: &Matrix<T>,
    delta: T,
    bank: &SampleBank<T>,
) -> Result<FreeEnergy<T>> {
    let (a1, l1, g1) = xkx_fields(s1, k, delta)?;
    let (a2, l2, g2) = xkx_fields(s2, k, delta)?;
    let (mean, err) = bank.expect(1, |x, z| {
        let field = |g: &Matrix<T>, l: &Matrix<T>| {
            let mut b = g.mul_vec(x);
            for (bi, ni) in b.iter_mut().zip(l.mul_vec(z)) {
                *bi += ni;
            }
            b
        };
        let z1 = prior.denoise(&a1, &field(&g1, &l1))?.log_z;
        let z2 = prior.denoise(&a2, &field(&g2, &l2))?.log_z;
        Ok(vec![z2 - z1])
    })?;
    Ok(FreeEnergy {
        value: mean[0] + xkx_energy_terms(s2, k, delta) - xkx_energy_terms(s1, k, delta),
        std_error: err[0],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeStateUv<T> {
    pub q_u: Matrix<T>,
    pub m_u: Matrix<T>,
    pub q_v: Matrix<T>,
    pub m_v: Matrix<T>,
    pub t: usize,
}

impl<T: Scalar> SeStateUv<T> {
    pub fn zero(r: usize) -> Self {
        Self {
            q_u: Matrix::zeros(r, r),
            m_u: Matrix::zeros(r, r),
            q_v: Matrix::zeros(r, r),
            m_v: Matrix::zeros(r, r),
            t: 0,
        }
    }

    /// Both sides start at `Q = M = c I`.
    pub fn isotropic(r: usize, c: T) -> Self {
        let q = Matrix::identity(r).scale(c);
        Self {
            q_u: q.clone(),
            m_u: q.clone(),
            q_v: q.clone(),
            m_v: q,
            t: 0,
        }
    }

    pub fn informative(prior_u: &Prior<T>, prior_v: &Prior<T>) -> Self {
        let qu = prior_second_moment_matrix(prior_u);
        let qv = prior_second_moment_matrix(prior_v);
        Self {
            q_u: qu.clone(),
            m_u: qu,
            q_v: qv.clone(),
            m_v: qv,
            t: 0,
        }
    }
}

/// Sample banks for the two sides of the UV model.
#[derive(Clone, Debug, PartialEq)]
pub struct UvBanks<T> {
    pub u: SampleBank<T>,
    pub v: SampleBank<T>,
}

impl<T: Scalar> UvBanks<T> {
    pub fn build(prior_u: &Prior<T>, prior_v: &Prior<T>, spec: &QuadratureSpec, index: u64) -> Result<Self> {
        Ok(Self {
            u: SampleBank::build(prior_u, spec, "se_u", index)?,
            v: SampleBank::build(prior_v, spec, "se_v", index)?,
        })
    }
}

/// Gaussian channel for one side: `A`, the noise square root and the
/// signal matrix applied to the planted vector.
struct SideField<T> {
    a: Matrix<T>,
    noise: Matrix<T>,
    signal: Matrix<T>,
}

impl<T: Scalar> SideField<T> {
    fn b(&self, x: &[T], z: &[T]) -> Vec<T> {
        let mut b = self.signal.mul_vec(x);
        for (bi, ni) in b.iter_mut().zip(self.noise.mul_vec(z)) {
            *bi += ni;
        }
        b
    }
}

/// U side: `A = αQ_v/Δ`, `B = αM_v u/Δ + √α ξ_v`, `ξ_v ~ N(0, Q_v/Δ)`.
/// V side: `A = Q_u/Δ`, `B = M_u v/Δ + ξ_u`, `ξ_u ~ N(0, Q_u/Δ)`.
fn uv_fields<T: Scalar>(state: &SeStateUv<T>, delta: T, alpha: T) -> Result<(SideField<T>, SideField<T>)> {
    let au = state.q_v.scale(alpha / delta).symmetrized();
    let av = state.q_u.scale(T::one() / delta).symmetrized();
    Ok((
        SideField {
            noise: psd_sqrt(&au, psd_tol(&au))?,
            a: au,
            signal: state.m_v.scale(alpha / delta),
        },
        SideField {
            noise: psd_sqrt(&av, psd_tol(&av))?,
            a: av,
            signal: state.m_u.scale(T::one() / delta),
        },
    ))
}

fn check_uv_args<T: Scalar>(state: &SeStateUv<T>, r: usize, delta: T, alpha: T) -> Result<()> {
    for (name, m) in [("Q_u", &state.q_u), ("M_u", &state.m_u), ("Q_v", &state.q_v), ("M_v", &state.m_v)] {
        check_square(name, m, r)?;
    }
    if !(delta > T::zero()) {
        return Err(Error::param("delta", "must be positive"));
    }
    if !(alpha > T::zero()) {
        return Err(Error::param("alpha", "must be positive"));
    }
    Ok(())
}

fn side_moments<T: Scalar>(
    prior: &Prior<T>,
    field: &SideField<T>,
    bank: &SampleBank<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let r = prior.rank();
    let (mean, _) = bank.expect(2 * r * r, |x, z| {
        let f = prior.denoise(&field.a, &field.b(x, z))?.mean;
        let mut out = Vec::with_capacity(2 * r * r);
        for i in 0..r {
            for j in 0..r {
                out.push(f[i] * f[j]);
            }
        }
        for i in 0..r {
            for j in 0..r {
                out.push(f[i] * x[j]);
            }
        }
        Ok(out)
    })?;
    Ok((
        Matrix::from_vec(r, r, mean[..r * r].to_vec())?,
        Matrix::from_vec(r, r, mean[r * r..].to_vec())?,
    ))
}

/// One synchronous UV SE update (both sides from the same state).
pub fn se_step_uv<T: Scalar>(
    state: &SeStateUv<T>,
    prior_u: &Prior<T>,
    prior_v: &Prior<T>,
    delta: T,
    alpha: T,
    banks: &UvBanks<T>,
) -> Result<SeStateUv<T>> {
    check_uv_args(state, prior_u.rank(), delta, alpha)?;
    let (fu, fv) = uv_fields(state, delta, alpha)?;
    let (q_u, m_u) = side_moments(prior_u, &fu, &banks.u)?;
    let (q_v, m_v) = side_moments(prior_v, &fv, &banks.v)?;
    Ok(SeStateUv {
        q_u,
        m_u,
        q_v,
        m_v,
        t: state.t + 1,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeFixedPointUv<T> {
    pub state: SeStateUv<T>,
    pub converged: bool,
    pub iterations: usize,
    pub last_change: T,
}

#[allow(clippy::too_many_arguments)]
pub fn se_fixed_point_uv<T: Scalar>(
    prior_u: &Prior<T>,
    prior_v: &Prior<T>,
    delta: T,
    alpha: T,
    quad: &QuadratureSpec,
    init: SeStateUv<T>,
    tol: T,
    t_max: usize,
) -> Result<SeFixedPointUv<T>> {
    let mut banks = UvBanks::build(prior_u, prior_v, quad, 0)?;
    let mut state = init;
    let mut last_change = T::infinity();
    for t in 0..t_max {
        if quad.fresh_noise && t > 0 {
            banks = UvBanks::build(prior_u, prior_v, quad, t as u64)?;
        }
        let next = se_step_uv(&state, prior_u, prior_v, delta, alpha, &banks)?;
        last_change = next.q_u.max_abs_diff(&state.q_u).max(next.q_v.max_abs_diff(&state.q_v));
        state = next;
        if last_change < tol {
            return Ok(SeFixedPointUv {
                iterations: state.t,
                state,
                converged: true,
                last_change,
            });
        }
    }
    Ok(SeFixedPointUv {
        iterations: state.t,
        state,
        converged: false,
        last_change,
    })
}

/// `φ = E log Z_u + α E log Z_v − α Tr(M_u M_vᵀ)/Δ + α Tr(Q_u Q_vᵀ)/(2Δ)`,
/// normalized per row of `U`.
pub fn se_free_energy_uv<T: Scalar>(
    state: &SeStateUv<T>,
    prior_u: &Prior<T>,
    prior_v: &Prior<T>,
    delta: T,
    alpha: T,
    banks: &UvBanks<T>,
) -> Result<FreeEnergy<T>> {
    check_uv_args(state, prior_u.rank(), delta, alpha)?;
    let (fu, fv) = uv_fields(state, delta, alpha)?;
    let (lu, eu) = banks
        .u
        .expect(1, |x, z| Ok(vec![prior_u.denoise(&fu.a, &fu.b(x, z))?.log_z]))?;
    let (lv, ev) = banks
        .v
        .expect(1, |x, z| Ok(vec![prior_v.denoise(&fv.a, &fv.b(x, z))?.log_z]))?;
    let value = lu[0] + alpha * lv[0]
        - alpha * state.m_u.matmul(&state.m_v.transpose()).trace() / delta
        + alpha * state.q_u.matmul(&state.q_v.transpose()).trace() / (T::lit(2.0) * delta);
    Ok(FreeEnergy {
        value,
        std_error: (eu[0] * eu[0] + alpha * alpha * ev[0] * ev[0]).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite_rule::<f64>(12);
        let moment = |p: i32| x.iter().zip(&w).map(|(&a, &b)| b * a.powi(p)).sum::<f64>();
        assert!((moment(0) - 1.0).abs() < 1e-12);
        assert!(moment(1).abs() < 1e-12);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-10);
        assert!((moment(8) - 105.0).abs() < 1e-8);
    }

    #[test]
    fn gauss_hermite_rank_limit() {
        assert!(QuadratureSpec::gauss_hermite(5).validate(4).is_err());
        assert!(QuadratureSpec::gauss_hermite(5).validate(3).is_ok());
        assert!(QuadratureSpec::monte_carlo(1, 0).validate(1).is_err());
    }

    #[test]
    fn zero_state_gaussian_prior_is_fixed() {
        let prior = Prior::standard_gaussian(2);
        let bank = SampleBank::build(&prior, &QuadratureSpec::monte_carlo(1000, 1), "t", 0).unwrap();
        let next = se_step_xkx(&SeState::zero(2), &prior, &Matrix::identity(2), 0.5, &bank).unwrap();
        assert_eq!(next.state.q.max_abs(), 0.0);
        assert_eq!(next.state.m.max_abs(), 0.0);
    }

    #[test]
    fn gaussian_rank_one_closed_form() {
        // Q' = (q/Δ) / (1 + q/Δ) for a standard Gaussian prior.
        let prior = Prior::<f64>::standard_gaussian(1);
        let bank = SampleBank::build(&prior, &QuadratureSpec::gauss_hermite(30), "t", 0).unwrap();
        let (q, delta) = (0.4, 0.25);
        let st = SeState::new(Matrix::filled(1, 1, q), Matrix::filled(1, 1, q));
        let next = se_step_xkx(&st, &prior, &Matrix::identity(1), delta, &bank).unwrap().state;
        let snr = q / delta;
        assert!((next.q[(0, 0)] - snr / (1.0 + snr)).abs() < 1e-12);
        assert!((next.m[(0, 0)] - snr / (1.0 + snr)).abs() < 1e-12);
    }

    #[test]
    fn uniform_community_point_is_fixed() {
        let r = 3;
        let prior = Prior::<f64>::community(r).unwrap();
        let bank = SampleBank::build(&prior, &QuadratureSpec::monte_carlo(5000, 2), "t", 0).unwrap();
        let st = SeState::community(r, 0.0);
        let next = se_step_xkx(&st, &prior, &Matrix::identity(r), 0.2, &bank).unwrap().state;
        assert!(next.q.max_abs_diff(&st.q) < 1e-12);
        let (a, b) = community_coordinates(&next.q);
        assert!((a - 1.0).abs() < 1e-12 && b.abs() < 1e-12);
        assert!((se_mse(&prior, &st.q, &st.m) - (1.0 - 1.0 / r as f64)).abs() < 1e-12);
    }

    #[test]
    fn community_helpers_round_trip() {
        let q = community_matrix::<f64>(4, 0.3);
        let (a, b) = community_coordinates(&q);
        assert!((a - 0.7).abs() < 1e-14 && (b - 0.3).abs() < 1e-14);
        let prior = Prior::community(4).unwrap();
        // (1 − 1/r)(1 − b)
        assert!((se_mse(&prior, &q, &q) - 0.75 * 0.7).abs() < 1e-14);
    }

    #[test]
    fn frozen_bank_is_deterministic() {
        let prior = Prior::community(2).unwrap();
        let quad = QuadratureSpec::monte_carlo(2000, 7);
        let run = || {
            se_fixed_point_xkx(&prior, &Matrix::identity(2), 0.15, &quad, SeState::community(2, 0.01), 1e-9, 50)
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn uv_gaussian_fixed_point() {
        // q_u = A/(1+A), A = αq_v/Δ; q_v = (q_u/Δ)/(1 + q_u/Δ)
        let g = Prior::<f64>::standard_gaussian(1);
        let quad = QuadratureSpec::gauss_hermite(20);
        let fp = se_fixed_point_uv(&g, &g, 0.1, 0.5, &quad, SeStateUv::isotropic(1, 0.5), 1e-13, 500).unwrap();
        assert!(fp.converged);
        assert!((fp.state.q_u[(0, 0)] - 49.0 / 60.0).abs() < 1e-9, "{:?}", fp.state);
        let qu = fp.state.q_u[(0, 0)];
        assert!((fp.state.q_v[(0, 0)] - (qu / 0.1) / (1.0 + qu / 0.1)).abs() < 1e-9);
    }

    #[test]
    fn uv_zero_state_stays_zero() {
        let g = Prior::standard_gaussian(2);
        let banks = UvBanks::build(&g, &g, &QuadratureSpec::monte_carlo(100, 0), 0).unwrap();
        let next = se_step_uv(&SeStateUv::zero(2), &g, &g, 0.3, 1.5, &banks).unwrap();
        assert_eq!(next.q_u.max_abs() + next.q_v.max_abs(), 0.0);
    }
}
