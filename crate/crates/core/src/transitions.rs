//! Community detection in the symmetric `X Xᵀ` model with `r` groups:
//! the scalar state evolution `b' = ℳ_r(b/Δ)` and the location of its
//! phase transitions.
//!
//! `ℳ_r(x) = r/(r−1) · (E[softmax_1(x/r · e_1 + u)] − 1/r)` with
//! `u_k ~ N(0, x/r)` i.i.d. Two unbiased Monte Carlo forms are used on a
//! frozen bank of standard normals:
//!
//! * direct: by exchangeability and a change of measure, every coordinate
//!   contributes, and the per-sample value vanishes at `x = 0`, so small-`x`
//!   ratios `ℳ_r(x)/x` carry little noise;
//! * complement: `1 − ℳ_r = r E[softmax_2]` sampled under a tilt that
//!   equalizes the first two coordinates, which resolves `1 − ℳ_r` when it
//!   is many orders of magnitude below one.
//!
//! Both average each draw with its mirror image `−z`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, Matrix};
use crate::rng::{standard_normal, stream};
use crate::Scalar;

/// Frozen standard normal draws shared by every `ℳ_r` evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MrBank<T> {
    pub r: usize,
    pub z: Matrix<T>,
}

impl<T: Scalar> MrBank<T> {
    pub fn new(r: usize, samples: usize, seed: u64) -> Result<Self> {
        if r < 2 {
            return Err(Error::param("r", "need at least two groups"));
        }
        if samples < 2 {
            return Err(Error::param("samples", "need at least two samples"));
        }
        let mut rng = stream(seed, "m_r", r as u64);
        let z = Matrix::from_fn(samples, r, |_, _| standard_normal(&mut rng));
        Ok(Self { r, z })
    }

    pub fn samples(&self) -> usize {
        self.z.rows()
    }

    /// Default sample count: `2·10⁵` up to `r = 32`, `10⁶` beyond.
    pub fn default_samples(r: usize) -> usize {
        if r <= 32 {
            200_000
        } else {
            1_000_000
        }
    }
}

/// `ℳ_r(x)` with `1 − ℳ_r(x)` kept separately (it can be far below the
/// rounding level of `ℳ_r` itself).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrValue<T> {
    pub value: T,
    pub complement: T,
    pub std_error: T,
}

struct Scratch<T> {
    u: Vec<T>,
}

/// Per-draw value of the direct form, averaged over `±z`.
fn direct_draw<T: Scalar>(z: &[T], s: T, sd: T, c: T, scratch: &mut Scratch<T>) -> T {
    let tiny = T::min_positive_value() * T::lit(1e20);
    let mut acc = T::zero();
    for sign in [T::one(), -T::one()] {
        let u = &mut scratch.u;
        u.clear();
        u.extend(z.iter().map(|&zk| sign * sd * zk));
        let mx = u.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in u.iter_mut() {
            *v -= mx;
            total += v.exp();
        }
        let ln_total = total.ln();
        let base = total * (-s).exp();
        for &le in u.iter() {
            let e = le.exp();
            // e_k / (T e^{−s} + c e_k), in log form once e_k underflows
            let ratio = if e > tiny {
                e / (base + c * e)
            } else {
                T::one() / ((ln_total - s - le).exp() + c)
            };
            acc += c * (T::one() - e / total) * ratio;
        }
    }
    acc / T::lit(2.0)
}

/// Per-draw value of `r · w · softmax_2` under the tilted measure.
fn complement_draw<T: Scalar>(z: &[T], r: usize, s: T, sd: T, scratch: &mut Scratch<T>) -> T {
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for sign in [T::one(), -T::one()] {
        let u = &mut scratch.u;
        u.clear();
        u.extend(z.iter().map(|&zk| sign * sd * zk));
        let u1 = u[0] - s * half;
        let u2 = u[1] + s * half;
        let log_w = (u1 - u2) * half + s * T::lit(0.25);
        u[0] = u1 + s;
        u[1] = u2;
        let mx = u.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let total: T = u.iter().map(|&v| (v - mx).exp()).sum();
        let p2 = (u[1] - mx).exp() / total;
        acc += T::from_usize_lossy(r) * log_w.exp() * p2;
    }
    acc / T::lit(2.0)
}

fn mean_and_error<T: Scalar>(values: &[T]) -> (T, T) {
    let n = T::from_usize_lossy(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / (n - T::one());
    (mean, (var / n).sqrt())
}

fn draws<T: Scalar>(bank: &MrBank<T>, f: impl Fn(&[T], &mut Scratch<T>) -> T + Sync) -> Vec<T> {
    const CHUNK: usize = 4096;
    let n = bank.samples();
    let chunks: Vec<Vec<T>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut scratch = Scratch {
                u: Vec::with_capacity(bank.r),
            };
            (c * CHUNK..((c + 1) * CHUNK).min(n))
                .map(|i| f(bank.z.row(i), &mut scratch))
                .collect()
        })
        .collect();
    chunks.concat()
}

fn check_x<T: Scalar>(x: T) -> Result<()> {
    if !(x >= T::zero()) || !x.is_finite() {
        return Err(Error::Domain(format!("m_r needs a finite x >= 0, got {x}")));
    }
    Ok(())
}

/// Per-draw values of the direct estimator of `ℳ_r(x)`.
pub fn m_r_direct_draws<T: Scalar>(bank: &MrBank<T>, x: T) -> Result<Vec<T>> {
    check_x(x)?;
    let r = bank.r;
    let s = x / T::from_usize_lossy(r);
    let sd = s.sqrt();
    let c = -(-s).exp_m1();
    let norm = T::one() / T::from_usize_lossy(r - 1);
    Ok(draws(bank, |z, sc| direct_draw(z, s, sd, c, sc) * norm))
}

/// Per-draw values of the complement estimator of `1 − ℳ_r(x)`.
pub fn m_r_complement_draws<T: Scalar>(bank: &MrBank<T>, x: T) -> Result<Vec<T>> {
    check_x(x)?;
    let r = bank.r;
    let s = x / T::from_usize_lossy(r);
    if s == T::zero() {
        return Ok(vec![T::one(); bank.samples()]);
    }
    let sd = s.sqrt();
    Ok(draws(bank, |z, sc| complement_draw(z, r, s, sd, sc)))
}

/// `ℳ_r(x)` from the bank: the direct form while it is at most 1/2,
/// otherwise one minus the complement form.
pub fn m_r<T: Scalar>(bank: &MrBank<T>, x: T) -> Result<MrValue<T>> {
    let (value, err) = mean_and_error(&m_r_direct_draws(bank, x)?);
    if value <= T::lit(0.5) {
        return Ok(MrValue {
            value,
            complement: T::one() - value,
            std_error: err,
        });
    }
    let (comp, err) = mean_and_error(&m_r_complement_draws(bank, x)?);
    Ok(MrValue {
        value: T::one() - comp,
        complement: comp,
        std_error: err,
    })
}

/// `ℳ_r` tabulated on a grid with one frozen bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarSeCurve<T> {
    pub r: usize,
    pub x: Vec<T>,
    pub m: Vec<T>,
    pub std_error: Vec<T>,
    pub samples: usize,
}

impl<T: Scalar> ScalarSeCurve<T> {
    pub fn compute(bank: &MrBank<T>, grid: &[T]) -> Result<Self> {
        let values: Vec<MrValue<T>> = grid.iter().map(|&x| m_r(bank, x)).collect::<Result<_>>()?;
        Ok(Self {
            r: bank.r,
            x: grid.to_vec(),
            m: values.iter().map(|v| v.value).collect(),
            std_error: values.iter().map(|v| v.std_error).collect(),
            samples: bank.samples(),
        })
    }
}

/// `n` log-spaced points on `[lo, hi]`.
pub fn log_grid<T: Scalar>(lo: T, hi: T, n: usize) -> Result<Vec<T>> {
    if !(lo > T::zero() && hi > lo) || n < 2 {
        return Err(Error::param("grid", "need 0 < lo < hi and at least two points"));
    }
    let (a, b) = (lo.ln(), hi.ln());
    let step = (b - a) / T::from_usize_lossy(n - 1);
    Ok((0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                (a + step * T::from_usize_lossy(i)).exp()
            }
        })
        .collect())
}

/// Default transition grid: log-spaced over `[10⁻³ r², 10 r ln r]`.
pub fn default_grid<T: Scalar>(r: usize, points: usize) -> Result<Vec<T>> {
    let rt = T::from_usize_lossy(r);
    let hi = T::lit(10.0) * rt * rt.ln();
    let lo = T::lit(1e-3) * rt * rt;
    log_grid(lo, hi.max(lo * T::lit(10.0)), points)
}

pub const DEFAULT_GRID_POINTS: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPointKind {
    /// `b ≈ 0`: the estimate carries no information on the groups.
    Uniform,
    /// `b > 0`: the informative ("far") fixed point.
    Far,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BFixedPoint<T> {
    pub b: T,
    /// `1 − b`, resolved below the rounding level of `b`.
    pub one_minus_b: T,
    pub iterations: usize,
    pub converged: bool,
    pub kind: FixedPointKind,
}

impl<T: Scalar> BFixedPoint<T> {
    /// `(1 − 1/r)(1 − b)`
    pub fn mse(&self, r: usize) -> T {
        (T::one() - T::one() / T::from_usize_lossy(r)) * self.one_minus_b
    }
}

/// Below this `b` a fixed point counts as the uniform one.
pub const UNIFORM_B: f64 = 1e-6;

/// Iterates `b ← ℳ_r(b/Δ)` until `|b' − b| < tol` or `t_max` steps.
pub fn iterate_b<T: Scalar>(
    bank: &MrBank<T>,
    delta: T,
    b0: T,
    tol: T,
    t_max: usize,
) -> Result<BFixedPoint<T>> {
    if !(delta > T::zero()) {
        return Err(Error::param("delta", "must be positive"));
    }
    if !(b0 >= T::zero() && b0 <= T::one()) {
        return Err(Error::param("b0", "must lie in [0, 1]"));
    }
    let mut b = b0;
    let mut comp = T::one() - b0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < t_max {
        let next = m_r(bank, b / delta)?;
        iterations += 1;
        // compare complements near b = 1 so tiny errors still register
        let change = if b > T::lit(0.5) {
            (next.complement - comp).abs()
        } else {
            (next.value - b).abs()
        };
        b = next.value;
        comp = next.complement;
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(BFixedPoint {
        b,
        one_minus_b: comp,
        iterations,
        converged,
        kind: if b < T::lit(UNIFORM_B) {
            FixedPointKind::Uniform
        } else {
            FixedPointKind::Far
        },
    })
}

/// `Δ_c = 1/r²`: the uniform fixed point is unstable below it.
pub fn delta_c<T: Scalar>(r: usize) -> Result<T> {
    if r < 2 {
        return Err(Error::param("r", "need at least two groups"));
    }
    let rt = T::from_usize_lossy(r);
    Ok(T::one() / (rt * rt))
}

/// Smallest `|p_in − p_out|` for which AMP detects the groups in the
/// dense SBM: `r √(p_out(1 − p_out)) / √n`.
pub fn sbm_threshold<T: Scalar>(r: usize, p_out: T, n: usize) -> Result<T> {
    if !(p_out > T::zero() && p_out < T::one()) {
        return Err(Error::param("p_out", "must lie strictly between 0 and 1"));
    }
    if n == 0 {
        return Err(Error::param("n", "must be positive"));
    }
    delta_c::<T>(r)?;
    Ok(T::from_usize_lossy(r) * (p_out * (T::one() - p_out)).sqrt() / T::from_usize_lossy(n).sqrt())
}

/// `(1/(2 r ln r), 1/(4 r ln r))`: large-`r` spinodal and static asymptotes.
pub fn asymptotic_reference<T: Scalar>(r: T) -> Result<(T, T)> {
    if !(r > T::one()) {
        return Err(Error::param("r", "need r > 1"));
    }
    let rl = r * r.ln();
    Ok((T::one() / (T::lit(2.0) * rl), T::one() / (T::lit(4.0) * rl)))
}

/// Relative precision of the located transition points.
pub const LOCATE_REL_TOL: f64 = 1e-3;

fn ratio<T: Scalar>(bank: &MrBank<T>, x: T) -> Result<T> {
    Ok(m_r(bank, x)?.value / x)
}

/// `max_x ℳ_r(x)/x`: grid search, then golden-section refinement in
/// `ln x` between the neighbours of the best grid point. Returns
/// `(Δ_spinodal, x*)`.
pub fn find_spinodal<T: Scalar>(bank: &MrBank<T>, grid: &[T]) -> Result<(T, T)> {
    let curve = ScalarSeCurve::compute(bank, grid)?;
    spinodal_from_curve(bank, &curve)
}

fn spinodal_from_curve<T: Scalar>(bank: &MrBank<T>, curve: &ScalarSeCurve<T>) -> Result<(T, T)> {
    let ratios: Vec<T> = curve.x.iter().zip(&curve.m).map(|(&x, &m)| m / x).collect();
    let best = (0..ratios.len())
        .max_by(|&i, &j| ratios[i].partial_cmp(&ratios[j]).unwrap_or(std::cmp::Ordering::Equal))
        .ok_or_else(|| Error::GridRange("empty grid".into()))?;
    if best == 0 || best + 1 == ratios.len() {
        return Err(Error::GridRange(format!(
            "maximum of M_r(x)/x sits on the grid edge at x = {}",
            curve.x[best]
        )));
    }
    let mut lo = curve.x[best - 1].ln();
    let mut hi = curve.x[best + 1].ln();
    let g = T::lit((5f64.sqrt() - 1.0) / 2.0);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let mut fc = ratio(bank, c.exp())?;
    let mut fd = ratio(bank, d.exp())?;
    let tol = T::lit(LOCATE_REL_TOL) * T::lit(0.1);
    while hi - lo > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = ratio(bank, c.exp())?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = ratio(bank, d.exp())?;
        }
    }
    let x = ((lo + hi) / T::lit(2.0)).exp();
    let best_grid = ratios[best];
    let refined = ratio(bank, x)?;
    Ok(if refined >= best_grid {
        (refined, x)
    } else {
        (best_grid, curve.x[best])
    })
}

/// Equal-area point: the `x*` where `∫₀ˣ ℳ_r = x ℳ_r(x)/2` (last sign
/// change of the area from negative to positive on the grid, refined by
/// bisection). Returns `(Δ_static = ℳ_r(x*)/x*, x*)`.
pub fn find_static<T: Scalar>(bank: &MrBank<T>, grid: &[T]) -> Result<(T, T)> {
    let curve = ScalarSeCurve::compute(bank, grid)?;
    static_from_curve(bank, &curve)
}

fn static_from_curve<T: Scalar>(bank: &MrBank<T>, curve: &ScalarSeCurve<T>) -> Result<(T, T)> {
    let half = T::lit(0.5);
    let n = curve.x.len();
    // trapezoid from the origin, where ℳ_r vanishes
    let mut cum = Vec::with_capacity(n);
    let mut acc = curve.x[0] * curve.m[0] * half;
    cum.push(acc);
    for i in 1..n {
        acc += (curve.x[i] - curve.x[i - 1]) * (curve.m[i] + curve.m[i - 1]) * half;
        cum.push(acc);
    }
    let area: Vec<T> = (0..n).map(|i| cum[i] - curve.x[i] * curve.m[i] * half).collect();
    let crossing = (0..n - 1)
        .rev()
        .find(|&i| area[i] < T::zero() && area[i + 1] >= T::zero())
        .ok_or_else(|| {
            let lo = area.iter().fold(T::infinity(), |a, &b| a.min(b));
            let hi = area.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            Error::GridRange(format!(
                "equal-area function never crosses zero upward on [{}, {}] (range {:e} .. {:e})",
                curve.x[0],
                curve.x[n - 1],
                lo.as_f64(),
                hi.as_f64()
            ))
        })?;
    let (x0, m0, c0) = (curve.x[crossing], curve.m[crossing], cum[crossing]);
    let area_at = |x: T| -> Result<(T, T)> {
        let m = m_r(bank, x)?.value;
        Ok((c0 + (x - x0) * (m + m0) * half - x * m * half, m))
    };
    let mut lo = x0;
    let mut hi = curve.x[crossing + 1];
    let mut m_mid = curve.m[crossing + 1];
    while (hi - lo) / lo > T::lit(LOCATE_REL_TOL) * T::lit(0.1) {
        let mid = (lo + hi) * half;
        let (a, m) = area_at(mid)?;
        m_mid = m;
        if a < T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = (lo + hi) * half;
    let m = if m_mid > T::zero() { m_r(bank, x)?.value } else { m_mid };
    Ok((m / x, x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport<T> {
    pub r: usize,
    pub delta_c: T,
    pub delta_static: Option<T>,
    pub delta_spinodal: Option<T>,
    pub order: Order,
    pub rel_tol: T,
    pub samples: usize,
    pub grid_points: usize,
}

impl<T: Scalar> TransitionReport<T> {
    pub fn static_times_4rlogr(&self) -> Option<T> {
        let r = T::from_usize_lossy(self.r);
        self.delta_static.map(|d| d * T::lit(4.0) * r * r.ln())
    }

    pub fn spinodal_times_2rlogr(&self) -> Option<T> {
        let r = T::from_usize_lossy(self.r);
        self.delta_spinodal.map(|d| d * T::lit(2.0) * r * r.ln())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransitionOptions {
    /// Monte Carlo draws per `ℳ_r` evaluation; `None` uses
    /// [`MrBank::default_samples`].
    pub samples: Option<usize>,
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for TransitionOptions {
    fn default() -> Self {
        Self {
            samples: None,
            grid_points: DEFAULT_GRID_POINTS,
            seed: 0,
        }
    }
}

/// All three transitions for `r` groups. For `r ≤ 4` the transition is
/// continuous and only `Δ_c` exists.
pub fn transition_report<T: Scalar>(r: usize, opts: &TransitionOptions) -> Result<TransitionReport<T>> {
    let dc = delta_c::<T>(r)?;
    let samples = opts.samples.unwrap_or_else(|| MrBank::<T>::default_samples(r));
    if r <= 4 {
        return Ok(TransitionReport {
            r,
            delta_c: dc,
            delta_static: None,
            delta_spinodal: None,
            order: Order::Second,
            rel_tol: T::lit(LOCATE_REL_TOL),
            samples,
            grid_points: opts.grid_points,
        });
    }
    let bank = MrBank::new(r, samples, opts.seed)?;
    let grid = default_grid(r, opts.grid_points)?;
    let curve = ScalarSeCurve::compute(&bank, &grid)?;
    let (sp, _) = spinodal_from_curve(&bank, &curve)?;
    let (st, _) = static_from_curve(&bank, &curve)?;
    Ok(TransitionReport {
        r,
        delta_c: dc,
        delta_static: Some(st),
        delta_spinodal: Some(sp),
        order: Order::First,
        rel_tol: T::lit(LOCATE_REL_TOL),
        samples,
        grid_points: opts.grid_points,
    })
}

/// Second-order coefficient `c₂` of `ℳ_r(x) = x/r² + c₂ x² + …`, from a
/// least-squares quadratic fit of `ℳ_r(x)/x` on `xs`. The standard error
/// comes from batch means: the bank is split into `batches` parts and the
/// fit repeated on each.
pub fn quadratic_coefficient<T: Scalar>(bank: &MrBank<T>, xs: &[T], batches: usize) -> Result<(T, T)> {
    if xs.len() < 3 {
        return Err(Error::param("xs", "need at least three points for a quadratic fit"));
    }
    if xs.iter().any(|&x| !(x > T::zero())) {
        return Err(Error::param("xs", "points must be positive"));
    }
    if batches < 2 || batches > bank.samples() {
        return Err(Error::param("batches", "need at least two batches"));
    }
    let per_x: Vec<Vec<T>> = xs.iter().map(|&x| m_r_direct_draws(bank, x)).collect::<Result<_>>()?;
    let fit = |range: std::ops::Range<usize>| -> Result<T> {
        let len = T::from_usize_lossy(range.len());
        let ys: Vec<T> = per_x
            .iter()
            .zip(xs)
            .map(|(d, &x)| d[range.clone()].iter().copied().sum::<T>() / len / x)
            .collect();
        Ok(quadratic_fit(xs, &ys)?[1])
    };
    let all = fit(0..bank.samples())?;
    let size = bank.samples() / batches;
    let coefs: Vec<T> = (0..batches)
        .map(|b| fit(b * size..(b + 1) * size))
        .collect::<Result<_>>()?;
    let (_, err) = mean_and_error(&coefs);
    Ok((all, err))
}

/// Least-squares `(c0, c1, c2)` for `y ≈ c0 + c1 x + c2 x²`.
pub fn quadratic_fit<T: Scalar>(xs: &[T], ys: &[T]) -> Result<[T; 3]> {
    let mut ata = Matrix::zeros(3, 3);
    let mut aty = [T::zero(); 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let row = [T::one(), x, x * x];
        for i in 0..3 {
            aty[i] += row[i] * y;
            for j in 0..3 {
                ata[(i, j)] += row[i] * row[j];
            }
        }
    }
    let (inv, _) = spd_inverse(&ata)?;
    let c = inv.mul_vec(&aty);
    Ok([c[0], c[1], c[2]])
}
