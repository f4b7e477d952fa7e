//! AMP solvers for the `X K Xᵀ` and `U Vᵀ` models and their Bethe free
//! energies.
//!
//! Each sweep is synchronous: all fields are computed from the same
//! snapshot of the estimates, then every row is denoised, then the
//! covariance sums are reduced in row order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::ScoreMatrix;
use crate::error::{Error, Result};
use crate::instances::{
    align_communities, align_signs, community_overlap, mse, order_parameters, Model,
    Overlap, PlantedInstance,
};
use crate::linalg::{dot, Matrix};
use crate::priors::Prior;
use crate::rng::{standard_normal, stream};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Tiny random estimates (`init_scale · N(0,1)`), zero covariances.
    #[default]
    Uninformative,
    /// Estimates start at the planted factors, zero covariances.
    Informative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmpOptions<T> {
    /// `γ` in `X ← (1−γ) X_new + γ X`; must lie in `[0, 1)`.
    pub damping: T,
    pub t_min: usize,
    pub t_max: usize,
    pub tol: T,
    pub init: Init,
    /// Standard deviation of the uninformative start. Must stay above the
    /// rounding level of the first denoised estimates (~1e-7 in `f32`),
    /// otherwise the uniform point is never left.
    pub init_scale: T,
    pub seed: u64,
    /// Record mse/overlap at every iteration (costly for large r).
    pub trace: bool,
}

impl<T: Scalar> Default for AmpOptions<T> {
    fn default() -> Self {
        Self {
            damping: T::zero(),
            t_min: 10,
            t_max: 1000,
            tol: T::lit(1e-6),
            init: Init::Uninformative,
            init_scale: T::lit(1e-10),
            seed: 0,
            trace: false,
        }
    }
}

impl<T: Scalar> AmpOptions<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping >= T::zero() && self.damping < T::one()) {
            return Err(Error::param("damping", "must lie in [0, 1)"));
        }
        if self.t_max == 0 {
            return Err(Error::param("t_max", "must be at least 1"));
        }
        if self.t_min > self.t_max {
            return Err(Error::param("t_min", "exceeds t_max"));
        }
        if !(self.tol > T::zero()) {
            return Err(Error::param("tol", "must be positive"));
        }
        if !(self.init_scale >= T::zero()) || !self.init_scale.is_finite() {
            return Err(Error::param("init_scale", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Estimates for one side of the factorization.
#[derive(Clone, Debug, PartialEq)]
pub struct Side<T> {
    /// Current means `a_i`, one row per variable.
    pub a: Matrix<T>,
    /// Means from the previous sweep (used by the Onsager term).
    pub a_old: Matrix<T>,
    /// `Σ_i v_i`, the summed r×r posterior covariances.
    pub v_sum: Matrix<T>,
    /// `A` used for the latest denoising.
    pub field_a: Matrix<T>,
    /// `B_i` rows used for the latest denoising.
    pub field_b: Matrix<T>,
}

impl<T: Scalar> Side<T> {
    fn new(a: Matrix<T>, a_old: Matrix<T>) -> Self {
        let (n, r) = a.shape();
        Self {
            a,
            a_old,
            v_sum: Matrix::zeros(r, r),
            field_a: Matrix::zeros(r, r),
            field_b: Matrix::zeros(n, r),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmpState<T> {
    /// `X` for the XKX model, `U` for the UV model.
    pub x: Side<T>,
    /// `V` for the UV model.
    pub v: Option<Side<T>>,
    pub t: usize,
    /// `‖X − X_old‖²/n` (plus the V-side change over `m` for the UV model).
    pub diff: T,
}

impl<T: Scalar> AmpState<T> {
    /// State for the XKX model with explicit means and covariance sum.
    pub fn xkx(a: Matrix<T>, a_old: Matrix<T>, v_sum: Matrix<T>) -> Self {
        let mut x = Side::new(a, a_old);
        x.v_sum = v_sum;
        Self {
            x,
            v: None,
            t: 0,
            diff: T::infinity(),
        }
    }

    pub fn uv(u: Side<T>, v: Side<T>) -> Self {
        Self {
            x: u,
            v: Some(v),
            t: 0,
            diff: T::infinity(),
        }
    }

    pub fn side(a: Matrix<T>, a_old: Matrix<T>, v_sum: Matrix<T>) -> Side<T> {
        let mut s = Side::new(a, a_old);
        s.v_sum = v_sum;
        s
    }
}

fn random_init<T: Scalar>(rows: usize, r: usize, scale: T, seed: u64, tag: &str) -> Matrix<T> {
    let mut rng = stream(seed, tag, 0);
    Matrix::from_fn(rows, r, |_, _| scale * standard_normal::<T, _>(&mut rng))
}

/// Initial state per the chosen mode. Informative initialization needs the
/// planted factors.
pub fn initial_state<T: Scalar>(
    instance: &PlantedInstance<T>,
    opts: &AmpOptions<T>,
) -> Result<AmpState<T>> {
    let r = instance.rank;
    let make = |rows: usize, truth: Option<&Matrix<T>>, tag: &str| -> Result<Side<T>> {
        match opts.init {
            Init::Uninformative => Ok(Side::new(
                random_init(rows, r, opts.init_scale, opts.seed, tag),
                Matrix::zeros(rows, r),
            )),
            Init::Informative => {
                let t = truth.ok_or_else(|| {
                    Error::param("init", "informative initialization needs the planted factors")
                })?;
                Ok(Side::new(t.clone(), t.clone()))
            }
        }
    };
    let truth = instance.truth.as_ref();
    match instance.model {
        Model::Xkx => Ok(AmpState {
            x: make(instance.n, truth.map(|t| &t.left), "amp_init")?,
            v: None,
            t: 0,
            diff: T::infinity(),
        }),
        Model::Uv => Ok(AmpState {
            x: make(instance.n, truth.map(|t| &t.left), "amp_init_u")?,
            v: Some(make(
                instance.m,
                truth.and_then(|t| t.right.as_ref()),
                "amp_init_v",
            )?),
            t: 0,
            diff: T::infinity(),
        }),
    }
}

struct Denoised<T> {
    mean: Matrix<T>,
    cov_sum: Matrix<T>,
    log_z: Vec<T>,
}

/// Denoises every row of `b` with the common `a`; covariances are summed
/// in row order so the result does not depend on scheduling.
fn denoise_rows<T: Scalar>(
    prior: &Prior<T>,
    a: &Matrix<T>,
    b: &Matrix<T>,
    iteration: usize,
) -> Result<Denoised<T>> {
    let r = a.rows();
    if !b.all_finite() || !a.all_finite() {
        return Err(Error::Divergence {
            iteration,
            what: "non-finite field".into(),
        });
    }
    let rows: Vec<_> = (0..b.rows())
        .into_par_iter()
        .map(|i| prior.denoise(a, b.row(i)))
        .collect::<Result<_>>()?;
    let mut mean = Matrix::zeros(b.rows(), r);
    let mut cov_sum = Matrix::zeros(r, r);
    let mut log_z = Vec::with_capacity(b.rows());
    for (i, d) in rows.into_iter().enumerate() {
        mean.row_mut(i).copy_from_slice(&d.mean);
        for (acc, &c) in cov_sum.as_mut_slice().iter_mut().zip(d.covariance.as_slice()) {
            *acc += c;
        }
        log_z.push(d.log_z);
    }
    if !mean.all_finite() || !cov_sum.all_finite() {
        return Err(Error::Divergence {
            iteration,
            what: "non-finite estimate".into(),
        });
    }
    Ok(Denoised { mean, cov_sum, log_z })
}

fn check_xkx<T: Scalar>(state: &AmpState<T>, s: &ScoreMatrix<T>, k: &Matrix<T>) -> Result<()> {
    let (n, r) = state.x.a.shape();
    if s.rows() != n || s.cols() != n {
        return Err(Error::Shape(format!("score matrix is {}x{}, expected {n}x{n}", s.rows(), s.cols())));
    }
    if k.shape() != (r, r) || state.x.a_old.shape() != (n, r) || state.x.v_sum.shape() != (r, r) {
        return Err(Error::Shape("state and coupling ranks disagree".into()));
    }
    Ok(())
}

/// `A = K (Σ a aᵀ) K /(nΔ)` and `B = S a K/√n − a_old K v K/(nΔ)`.
pub fn fields_xkx<T: Scalar>(
    x: &Side<T>,
    s: &ScoreMatrix<T>,
    k: &Matrix<T>,
    delta: T,
) -> (Matrix<T>, Matrix<T>) {
    let n = T::from_usize_lossy(x.a.rows());
    let inv_n_delta = T::one() / (n * delta);
    let field_a = k.matmul(&x.a.t_matmul(&x.a)).matmul(k).scale(inv_n_delta);
    let sa = s.values.mul_tall(&x.a).scale(T::one() / n.sqrt());
    let onsager = k.matmul(&x.v_sum).matmul(k).scale(inv_n_delta);
    let field_b = sa.matmul(k).sub(&x.a_old.matmul(&onsager));
    (field_a, field_b)
}

/// One synchronous AMP sweep for the XKX model.
pub fn amp_step_xkx<T: Scalar>(
    state: &AmpState<T>,
    s: &ScoreMatrix<T>,
    k: &Matrix<T>,
    delta: T,
    prior: &Prior<T>,
    damping: T,
) -> Result<AmpState<T>> {
    if !(damping >= T::zero() && damping < T::one()) {
        return Err(Error::param("damping", "must lie in [0, 1)"));
    }
    check_xkx(state, s, k)?;
    let t = state.t + 1;
    let (field_a, field_b) = fields_xkx(&state.x, s, k, delta);
    let d = denoise_rows(prior, &field_a, &field_b, t)?;
    let x = damped(&state.x, d, field_a, field_b, damping);
    let diff = x.a.sub(&x.a_old).frobenius_sq() / T::from_usize_lossy(x.a.rows());
    Ok(AmpState { x, v: None, t, diff })
}

fn damped<T: Scalar>(
    prev: &Side<T>,
    d: Denoised<T>,
    field_a: Matrix<T>,
    field_b: Matrix<T>,
    damping: T,
) -> Side<T> {
    let mut a = prev.a.clone();
    a.damp_towards(&d.mean, damping);
    let mut v_sum = prev.v_sum.clone();
    v_sum.damp_towards(&d.cov_sum, damping);
    Side {
        a,
        a_old: prev.a.clone(),
        v_sum,
        field_a,
        field_b,
    }
}

/// Bethe free energy of the XKX model at `state`:
/// `φ = (1/n) Σ log Z(A, B_i) − (1/2n) Σ log Z̃_i` with
/// `log Z̃_i = Σ_j S_ij a_iᵀ K a_j/√n − Σ_j Tr[K a_i a_iᵀ K (a_j a_jᵀ/2 + 2 v_j)]/(nΔ)`.
///
/// The fields are recomputed from the state, so at a fixed point this is
/// the free energy of the estimates it holds.
pub fn bethe_free_energy_xkx<T: Scalar>(
    state: &AmpState<T>,
    s: &ScoreMatrix<T>,
    k: &Matrix<T>,
    delta: T,
    prior: &Prior<T>,
) -> Result<T> {
    check_xkx(state, s, k)?;
    let x = &state.x;
    let n = T::from_usize_lossy(x.a.rows());
    let (field_a, field_b) = fields_xkx(x, s, k, delta);
    let d = denoise_rows(prior, &field_a, &field_b, state.t)?;
    let sum_log_z: T = d.log_z.iter().copied().sum();

    let sak = s.values.mul_tall(&x.a).matmul(k);
    let data: T = x
        .a
        .row_chunks()
        .zip(sak.row_chunks())
        .map(|(ai, ri)| dot(ai, ri))
        .sum::<T>()
        / n.sqrt();
    let q = x.a.t_matmul(&x.a);
    let kqk = k.matmul(&q).matmul(k);
    let quad = kqk.matmul(&q).trace() / T::lit(2.0) + T::lit(2.0) * kqk.matmul(&x.v_sum).trace();
    let sum_log_zt = data - quad / (n * delta);
    Ok(sum_log_z / n - sum_log_zt / (T::lit(2.0) * n))
}

fn check_uv<T: Scalar>(u: &Side<T>, v: &Side<T>, s: &ScoreMatrix<T>) -> Result<()> {
    let (n, r) = u.a.shape();
    let (m, rv) = v.a.shape();
    if s.rows() != n || s.cols() != m {
        return Err(Error::Shape(format!(
            "score matrix is {}x{}, expected {n}x{m}",
            s.rows(),
            s.cols()
        )));
    }
    if r != rv || u.a_old.shape() != (n, r) || v.a_old.shape() != (m, r) {
        return Err(Error::Shape("U and V sides disagree".into()));
    }
    Ok(())
}

fn uv_sides<T: Scalar>(state: &AmpState<T>) -> Result<(&Side<T>, &Side<T>)> {
    let v = state
        .v
        .as_ref()
        .ok_or_else(|| Error::Shape("state has no V side".into()))?;
    Ok((&state.x, v))
}

/// `(A_u, B_u, A_v, B_v)` from the current snapshot:
/// `B_u = S V/√n − U_old Σσ_v/(nΔ)`, `A_u = VᵀV/(nΔ)`, and symmetrically.
pub fn fields_uv<T: Scalar>(
    u: &Side<T>,
    v: &Side<T>,
    s: &ScoreMatrix<T>,
    delta: T,
) -> (Matrix<T>, Matrix<T>, Matrix<T>, Matrix<T>) {
    let n = T::from_usize_lossy(u.a.rows());
    let inv_sqrt_n = T::one() / n.sqrt();
    let inv_n_delta = T::one() / (n * delta);
    let a_u = v.a.t_matmul(&v.a).scale(inv_n_delta);
    let a_v = u.a.t_matmul(&u.a).scale(inv_n_delta);
    let b_u = s
        .values
        .mul_tall(&v.a)
        .scale(inv_sqrt_n)
        .sub(&u.a_old.matmul(&v.v_sum).scale(inv_n_delta));
    let b_v = s
        .values
        .t_mul_tall(&u.a)
        .scale(inv_sqrt_n)
        .sub(&v.a_old.matmul(&u.v_sum).scale(inv_n_delta));
    (a_u, b_u, a_v, b_v)
}

/// One synchronous sweep of the UV AMP (both sides from the same snapshot).
pub fn amp_step_uv<T: Scalar>(
    state: &AmpState<T>,
    s: &ScoreMatrix<T>,
    delta: T,
    prior_u: &Prior<T>,
    prior_v: &Prior<T>,
    damping: T,
) -> Result<AmpState<T>> {
    if !(damping >= T::zero() && damping < T::one()) {
        return Err(Error::param("damping", "must lie in [0, 1)"));
    }
    let (u, v) = uv_sides(state)?;
    check_uv(u, v, s)?;
    let t = state.t + 1;
    let (a_u, b_u, a_v, b_v) = fields_uv(u, v, s, delta);
    let du = denoise_rows(prior_u, &a_u, &b_u, t)?;
    let dv = denoise_rows(prior_v, &a_v, &b_v, t)?;
    let u_new = damped(u, du, a_u, b_u, damping);
    let v_new = damped(v, dv, a_v, b_v, damping);
    let diff = u_new.a.sub(&u_new.a_old).frobenius_sq() / T::from_usize_lossy(u_new.a.rows())
        + v_new.a.sub(&v_new.a_old).frobenius_sq() / T::from_usize_lossy(v_new.a.rows());
    Ok(AmpState {
        x: u_new,
        v: Some(v_new),
        t,
        diff,
    })
}

/// Bethe free energy of the UV model:
/// `φ = (1/n)[Σ_i log Z_u + Σ_j log Z_v] − (1/n) Σ_ij log Z̃_ij` with
/// `log Z̃_ij = u_iᵀv_j S_ij/√n − (u_iᵀσ_v,j u_i + v_jᵀσ_u,i v_j)/(nΔ) − (u_iᵀv_j)²/(2nΔ)`.
pub fn bethe_free_energy_uv<T: Scalar>(
    state: &AmpState<T>,
    s: &ScoreMatrix<T>,
    delta: T,
    prior_u: &Prior<T>,
    prior_v: &Prior<T>,
) -> Result<T> {
    let (u, v) = uv_sides(state)?;
    check_uv(u, v, s)?;
    let n = T::from_usize_lossy(u.a.rows());
    let (a_u, b_u, a_v, b_v) = fields_uv(u, v, s, delta);
    let du = denoise_rows(prior_u, &a_u, &b_u, state.t)?;
    let dv = denoise_rows(prior_v, &a_v, &b_v, state.t)?;
    let sum_log_z: T = du.log_z.iter().chain(&dv.log_z).copied().sum();

    let sv = s.values.mul_tall(&v.a);
    let data: T = u
        .a
        .row_chunks()
        .zip(sv.row_chunks())
        .map(|(ui, ri)| dot(ui, ri))
        .sum::<T>()
        / n.sqrt();
    let uu = u.a.t_matmul(&u.a);
    let vv = v.a.t_matmul(&v.a);
    let cross = uu.matmul(&v.v_sum).trace() + vv.matmul(&u.v_sum).trace();
    let quartic = uu.matmul(&vv).trace() / T::lit(2.0);
    let sum_log_zt = data - (cross + quartic) / (n * delta);
    Ok((sum_log_z - sum_log_zt) / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow<T> {
    pub t: usize,
    pub diff: T,
    pub mse: Option<T>,
    pub overlap: Option<T>,
}

/// Metrics for one factor against its planted value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideReport<T> {
    /// `x`, `u` or `v`.
    pub name: String,
    /// MSE after aligning the label (community) or sign symmetry.
    pub mse: T,
    pub overlap: Option<Overlap<T>>,
    /// `(1/n) Σ a_i a_iᵀ` after alignment.
    pub q: Vec<Vec<T>>,
    /// `(1/n) Σ a_i x_iᵀ` after alignment.
    pub m: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmpReport<T> {
    pub converged: bool,
    pub iterations: usize,
    pub free_energy: T,
    /// Empty when the instance carries no planted factors.
    pub sides: Vec<SideReport<T>>,
    pub diffs: Vec<T>,
    pub trace: Vec<TraceRow<T>>,
}

impl<T: Scalar> AmpReport<T> {
    /// MSE of the first factor (`X` or `U`), if the truth was available.
    pub fn mse(&self) -> Option<T> {
        self.sides.first().map(|s| s.mse)
    }

    pub fn overlap(&self) -> Option<T> {
        self.sides.first().and_then(|s| s.overlap.map(|o| o.overlap))
    }
}

/// Removes the symmetry the prior leaves unresolved: group labels for
/// community priors, column signs for zero-mean ones.
pub fn align<T: Scalar>(prior: &Prior<T>, estimate: &Matrix<T>, truth: &Matrix<T>) -> Result<Matrix<T>> {
    match prior {
        Prior::Community { .. } => align_communities(estimate, truth),
        Prior::Rademacher => Ok(align_signs(estimate, truth)?.0),
        Prior::Gaussian(g) => {
            if g.mean().iter().all(|&m| m == T::zero()) {
                Ok(align_signs(estimate, truth)?.0)
            } else {
                Ok(estimate.clone())
            }
        }
    }
}

fn side_report<T: Scalar>(
    name: &str,
    prior: &Prior<T>,
    estimate: &Matrix<T>,
    truth: &Matrix<T>,
) -> Result<SideReport<T>> {
    let aligned = align(prior, estimate, truth)?;
    let (q, m) = order_parameters(&aligned, truth)?;
    let overlap = match prior {
        Prior::Community { groups } => Some(community_overlap(estimate, truth, *groups)?),
        _ => None,
    };
    Ok(SideReport {
        name: name.into(),
        mse: mse(&aligned, truth)?,
        overlap,
        q: q.to_rows(),
        m: m.to_rows(),
    })
}

fn trace_row<T: Scalar>(prior: &Prior<T>, state: &AmpState<T>, truth: Option<&Matrix<T>>) -> Result<TraceRow<T>> {
    let (mse_v, overlap) = match truth {
        Some(t) => {
            let aligned = align(prior, &state.x.a, t)?;
            let ov = match prior {
                Prior::Community { groups } => Some(community_overlap(&state.x.a, t, *groups)?.overlap),
                _ => None,
            };
            (Some(mse(&aligned, t)?), ov)
        }
        None => (None, None),
    };
    Ok(TraceRow {
        t: state.t,
        diff: state.diff,
        mse: mse_v,
        overlap,
    })
}

fn check_ranks<T: Scalar>(instance: &PlantedInstance<T>, prior: &Prior<T>) -> Result<()> {
    if prior.rank() != instance.rank {
        return Err(Error::Shape(format!(
            "prior rank {} but instance rank {}",
            prior.rank(),
            instance.rank
        )));
    }
    Ok(())
}

/// Stopping rule: stop once `t > t_min` and `diff < tol`, or at `t_max`.
fn iterate<T: Scalar>(
    mut state: AmpState<T>,
    opts: &AmpOptions<T>,
    mut step: impl FnMut(&AmpState<T>) -> Result<AmpState<T>>,
    mut on_step: impl FnMut(&AmpState<T>) -> Result<()>,
) -> Result<(AmpState<T>, bool, Vec<T>)> {
    let mut diffs = Vec::new();
    let mut converged = false;
    while state.t < opts.t_max {
        state = step(&state)?;
        diffs.push(state.diff);
        on_step(&state)?;
        if state.t > opts.t_min && state.diff < opts.tol {
            converged = true;
            break;
        }
    }
    Ok((state, converged, diffs))
}

/// Runs the XKX AMP from the chosen initialization; returns the final
/// state along with the report.
pub fn run_amp_xkx<T: Scalar>(
    instance: &PlantedInstance<T>,
    prior: &Prior<T>,
    opts: &AmpOptions<T>,
) -> Result<(AmpReport<T>, AmpState<T>)> {
    opts.validate()?;
    check_ranks(instance, prior)?;
    if instance.model != Model::Xkx {
        return Err(Error::param("model", "instance is not an XKX instance"));
    }
    let k = instance
        .coupling
        .as_ref()
        .ok_or_else(|| Error::param("coupling", "XKX instance without K"))?;
    let truth = instance.truth.as_ref().map(|t| &t.left);
    let init = initial_state(instance, opts)?;
    let mut trace = Vec::new();
    let (state, converged, diffs) = iterate(
        init,
        opts,
        |s| amp_step_xkx(s, &instance.scores, k, instance.delta, prior, opts.damping),
        |s| {
            if opts.trace {
                trace.push(trace_row(prior, s, truth)?);
            }
            Ok(())
        },
    )?;
    let free_energy = bethe_free_energy_xkx(&state, &instance.scores, k, instance.delta, prior)?;
    let sides = match truth {
        Some(t) => vec![side_report("x", prior, &state.x.a, t)?],
        None => Vec::new(),
    };
    Ok((
        AmpReport {
            converged,
            iterations: state.t,
            free_energy,
            sides,
            diffs,
            trace,
        },
        state,
    ))
}

/// Runs the UV AMP; the report carries one entry per factor.
pub fn run_amp_uv<T: Scalar>(
    instance: &PlantedInstance<T>,
    prior_u: &Prior<T>,
    prior_v: &Prior<T>,
    opts: &AmpOptions<T>,
) -> Result<(AmpReport<T>, AmpState<T>)> {
    opts.validate()?;
    check_ranks(instance, prior_u)?;
    check_ranks(instance, prior_v)?;
    if instance.model != Model::Uv {
        return Err(Error::param("model", "instance is not a UV instance"));
    }
    let truth_u = instance.truth.as_ref().map(|t| &t.left);
    let init = initial_state(instance, opts)?;
    let mut trace = Vec::new();
    let (state, converged, diffs) = iterate(
        init,
        opts,
        |s| amp_step_uv(s, &instance.scores, instance.delta, prior_u, prior_v, opts.damping),
        |s| {
            if opts.trace {
                trace.push(trace_row(prior_u, s, truth_u)?);
            }
            Ok(())
        },
    )?;
    let free_energy = bethe_free_energy_uv(&state, &instance.scores, instance.delta, prior_u, prior_v)?;
    let mut sides = Vec::new();
    if let Some(t) = &instance.truth {
        sides.push(side_report("u", prior_u, &state.x.a, &t.left)?);
        if let (Some(tv), Some(v)) = (&t.right, &state.v) {
            sides.push(side_report("v", prior_v, &v.a, tv)?);
        }
    }
    Ok((
        AmpReport {
            converged,
            iterations: state.t,
            free_energy,
            sides,
            diffs,
            trace,
        },
        state,
    ))
}

/// Dispatches on the instance's model. For UV instances the V prior is
/// taken from the instance unless given.
pub fn run_amp<T: Scalar>(
    instance: &PlantedInstance<T>,
    prior: &Prior<T>,
    prior_v: Option<&Prior<T>>,
    opts: &AmpOptions<T>,
) -> Result<(AmpReport<T>, AmpState<T>)> {
    match instance.model {
        Model::Xkx => run_amp_xkx(instance, prior, opts),
        Model::Uv => {
            let pv = prior_v
                .or(instance.prior_v.as_ref())
                .ok_or_else(|| Error::param("prior_v", "UV model needs a V prior"))?;
            run_amp_uv(instance, prior, pv, opts)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::Channel;
    use crate::instances::{generate_uv, generate_xkx};

    fn uniform_state(n: usize, r: usize) -> AmpState<f64> {
        let a = Matrix::filled(n, r, 1.0 / r as f64);
        let v = Matrix::identity(r)
            .scale(1.0 / r as f64)
            .sub(&Matrix::filled(r, r, 1.0 / (r * r) as f64))
            .scale(n as f64);
        AmpState::xkx(a.clone(), a, v)
    }

    #[test]
    fn zero_scores_keep_uniform_point() {
        let (n, r, delta) = (6, 3, 0.4);
        let s = ScoreMatrix {
            values: Matrix::zeros(n, n),
            symmetric: true,
        };
        let prior = Prior::community(r).unwrap();
        let k = Matrix::identity(r);
        let st = uniform_state(n, r);
        let next = amp_step_xkx(&st, &s, &k, delta, &prior, 0.0).unwrap();
        assert!(next.x.a.max_abs_diff(&st.x.a) < 1e-15);
        let expect_a = Matrix::filled(r, r, 1.0 / ((r * r) as f64 * delta));
        assert!(next.x.field_a.max_abs_diff(&expect_a) < 1e-15);
        assert!(next.x.v_sum.max_abs_diff(&st.x.v_sum) < 1e-12);
        let phi = bethe_free_energy_xkx(&st, &s, &k, delta, &prior).unwrap();
        let expect = -1.0 / (4.0 * (r * r) as f64 * delta);
        assert!((phi - expect).abs() < 1e-14, "{phi} vs {expect}");
    }

    #[test]
    fn damping_must_be_below_one() {
        let s = ScoreMatrix {
            values: Matrix::zeros(2, 2),
            symmetric: true,
        };
        let prior = Prior::community(2).unwrap();
        let st = uniform_state(2, 2);
        assert!(amp_step_xkx(&st, &s, &Matrix::identity(2), 0.3, &prior, 1.0).is_err());
        let opts = AmpOptions::<f64> {
            damping: 1.0,
            ..Default::default()
        };
        assert!(opts.validate().is_err());
    }

    #[test]
    fn uv_zero_scores_stay_small() {
        let g = Prior::standard_gaussian(1);
        let inst = generate_uv(&g, &g, &Channel::gaussian(1.0).unwrap(), 8, 1.0, 1).unwrap();
        let mut zero = inst.clone();
        zero.scores.values = Matrix::zeros(8, 8);
        let opts = AmpOptions::<f64> {
            t_min: 0,
            t_max: 20,
            ..Default::default()
        };
        let (_, st) = run_amp_uv(&zero, &g, &g, &opts).unwrap();
        assert!(st.x.a.max_abs() < 1e-9);
        assert!(st.v.unwrap().a.max_abs() < 1e-9);
    }

    #[test]
    fn informative_start_requires_truth() {
        let prior = Prior::community(2).unwrap();
        let inst = generate_xkx(&prior, &Channel::gaussian(0.2).unwrap(), &Matrix::identity(2), 20, 3)
            .unwrap()
            .blind();
        let opts = AmpOptions::<f64> {
            init: Init::Informative,
            ..Default::default()
        };
        assert!(run_amp_xkx(&inst, &prior, &opts).is_err());
        let (report, _) = run_amp_xkx(&inst, &prior, &AmpOptions::default()).unwrap();
        assert!(report.sides.is_empty());
    }

    #[test]
    fn divergence_is_reported() {
        let prior = Prior::standard_gaussian(1);
        let inst = generate_xkx(&prior, &Channel::gaussian(1.0).unwrap(), &Matrix::identity(1), 5, 2).unwrap();
        let mut bad = inst.clone();
        bad.scores.values[(0, 1)] = f64::NAN;
        bad.scores.values[(1, 0)] = f64::NAN;
        let err = run_amp_xkx(&bad, &prior, &AmpOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn low_noise_recovers_communities() {
        let prior = Prior::<f64>::community(2).unwrap();
        let ch = Channel::gaussian(0.05).unwrap();
        let inst = generate_xkx(&prior, &ch, &Matrix::identity(2), 600, 5).unwrap();
        let opts = AmpOptions {
            t_min: 100,
            ..Default::default()
        };
        let (rep, _) = run_amp_xkx(&inst, &prior, &opts).unwrap();
        assert!(rep.converged);
        assert!(rep.overlap().unwrap() > 0.97, "{rep:?}");
        for row in rep.sides[0].q.iter().zip(&rep.sides[0].m) {
            for (q, m) in row.0.iter().zip(row.1) {
                assert!((q - m).abs() < 0.05);
            }
        }
    }

    #[test]
    fn f32_runs() {
        let prior = Prior::<f32>::community(2).unwrap();
        let ch = Channel::gaussian(0.05f32).unwrap();
        let inst = generate_xkx(&prior, &ch, &Matrix::identity(2), 300, 5).unwrap();
        let opts = AmpOptions {
            t_min: 100,
            tol: 1e-5,
            init_scale: 1e-4,
            ..Default::default()
        };
        let (rep, _) = run_amp_xkx(&inst, &prior, &opts).unwrap();
        assert!(rep.overlap().unwrap() > 0.95);
    }
}
