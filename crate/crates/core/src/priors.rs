//! Row priors and their denoisers.
//!
//! For a prior `P(x)` the denoiser is the mean of the tilted measure
//! `P(x) exp(Bᵀx - xᵀAx/2) / Z(A, B)`; its covariance is `∂f/∂B`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_sum_exp, spd_inverse, Matrix};
use crate::rng::standard_normal;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior<T: Scalar> {
    Gaussian(GaussianPrior<T>),
    /// One-hot vectors, each of the `groups` coordinates equally likely.
    Community { groups: usize },
    /// Rank one, `±1` with equal probability.
    Rademacher,
}

/// `N(mean, covariance)` with the precision factors cached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianSpec<T>", into = "GaussianSpec<T>")]
pub struct GaussianPrior<T: Scalar> {
    mean: Vec<T>,
    covariance: Matrix<T>,
    precision: Matrix<T>,
    precision_mean: Vec<T>,
    log_det_cov: T,
    mean_quad: T,
    cov_factor: Matrix<T>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GaussianSpec<T> {
    mean: Vec<T>,
    covariance: Vec<Vec<T>>,
}

impl<T: Scalar> TryFrom<GaussianSpec<T>> for GaussianPrior<T> {
    type Error = Error;
    fn try_from(spec: GaussianSpec<T>) -> Result<Self> {
        GaussianPrior::new(spec.mean, Matrix::from_rows(&spec.covariance)?)
    }
}

impl<T: Scalar> From<GaussianPrior<T>> for GaussianSpec<T> {
    fn from(p: GaussianPrior<T>) -> Self {
        GaussianSpec {
            covariance: p.covariance.to_rows(),
            mean: p.mean,
        }
    }
}

impl<T: Scalar> GaussianPrior<T> {
    pub fn new(mean: Vec<T>, covariance: Matrix<T>) -> Result<Self> {
        let r = mean.len();
        if r == 0 || covariance.shape() != (r, r) {
            return Err(Error::Shape(format!(
                "gaussian prior mean has length {r} but covariance is {:?}",
                covariance.shape()
            )));
        }
        if !covariance.is_symmetric() {
            return Err(Error::param("covariance", "must be symmetric"));
        }
        let (precision, log_det_cov) = spd_inverse(&covariance)
            .map_err(|_| Error::param("covariance", "must be positive definite"))?;
        let precision_mean = precision.mul_vec(&mean);
        let mean_quad = crate::linalg::dot(&mean, &precision_mean);
        let cov_factor = cholesky(&covariance)?;
        Ok(Self {
            mean,
            covariance,
            precision,
            precision_mean,
            log_det_cov,
            mean_quad,
            cov_factor,
        })
    }

    pub fn standard(r: usize) -> Self {
        Self::new(vec![T::zero(); r], Matrix::identity(r)).expect("identity covariance is valid")
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix<T> {
        &self.covariance
    }

    /// Lower Cholesky factor of the covariance.
    pub fn covariance_factor(&self) -> &Matrix<T> {
        &self.cov_factor
    }
}

/// Mean, covariance and log-normalizer of the tilted prior.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoised<T> {
    pub mean: Vec<T>,
    pub covariance: Matrix<T>,
    pub log_z: T,
}

impl<T: Scalar> Prior<T> {
    pub fn standard_gaussian(r: usize) -> Self {
        Prior::Gaussian(GaussianPrior::standard(r))
    }

    pub fn gaussian(mean: Vec<T>, covariance: Matrix<T>) -> Result<Self> {
        Ok(Prior::Gaussian(GaussianPrior::new(mean, covariance)?))
    }

    pub fn community(groups: usize) -> Result<Self> {
        if groups < 1 {
            return Err(Error::param("groups", "need at least one group"));
        }
        Ok(Prior::Community { groups })
    }

    pub fn rank(&self) -> usize {
        match self {
            Prior::Gaussian(g) => g.mean.len(),
            Prior::Community { groups } => *groups,
            Prior::Rademacher => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Prior::Gaussian(_) => "gaussian",
            Prior::Community { .. } => "community",
            Prior::Rademacher => "rademacher",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Prior::Community { groups } if *groups < 1 => {
                Err(Error::param("groups", "need at least one group"))
            }
            _ => Ok(()),
        }
    }

    /// `E‖x‖²`
    pub fn second_moment(&self) -> T {
        match self {
            Prior::Gaussian(g) => g.covariance.trace() + crate::linalg::dot(&g.mean, &g.mean),
            Prior::Community { .. } | Prior::Rademacher => T::one(),
        }
    }

    /// `E[x]`
    pub fn mean(&self) -> Vec<T> {
        match self {
            Prior::Gaussian(g) => g.mean.clone(),
            Prior::Community { groups } => vec![T::one() / T::from_usize_lossy(*groups); *groups],
            Prior::Rademacher => vec![T::zero()],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        match self {
            Prior::Gaussian(g) => {
                let z: Vec<T> = (0..g.mean.len()).map(|_| standard_normal(rng)).collect();
                let lz = g.cov_factor.mul_vec(&z);
                g.mean.iter().zip(lz).map(|(&m, d)| m + d).collect()
            }
            Prior::Community { groups } => {
                let mut x = vec![T::zero(); *groups];
                x[rng.random_range(0..*groups)] = T::one();
                x
            }
            Prior::Rademacher => {
                vec![if rng.random::<bool>() { T::one() } else { -T::one() }]
            }
        }
    }

    /// Finite support with probabilities, for priors that have one.
    pub fn atoms(&self) -> Option<Vec<(T, Vec<T>)>> {
        match self {
            Prior::Gaussian(_) => None,
            Prior::Community { groups } => {
                let w = T::one() / T::from_usize_lossy(*groups);
                Some(
                    (0..*groups)
                        .map(|k| {
                            let mut x = vec![T::zero(); *groups];
                            x[k] = T::one();
                            (w, x)
                        })
                        .collect(),
                )
            }
            Prior::Rademacher => Some(vec![
                (T::lit(0.5), vec![T::one()]),
                (T::lit(0.5), vec![-T::one()]),
            ]),
        }
    }

    fn check_shapes(&self, a: &Matrix<T>, b: &[T]) -> Result<()> {
        let r = self.rank();
        if a.shape() != (r, r) || b.len() != r {
            return Err(Error::Shape(format!(
                "denoiser of rank {r} got A {:?} and B of length {}",
                a.shape(),
                b.len()
            )));
        }
        Ok(())
    }

    /// Closed-form mean, covariance and `log Z(A, B)`.
    pub fn denoise(&self, a: &Matrix<T>, b: &[T]) -> Result<Denoised<T>> {
        self.check_shapes(a, b)?;
        match self {
            Prior::Community { groups } => Ok(community_denoise(*groups, a, b)),
            Prior::Rademacher => {
                let h = b[0];
                let m = h.tanh();
                Ok(Denoised {
                    mean: vec![m],
                    covariance: Matrix::filled(1, 1, T::one() - m * m),
                    log_z: log_cosh(h) - a[(0, 0)] / T::lit(2.0),
                })
            }
            Prior::Gaussian(g) => {
                let lambda = g.precision.add(a);
                let (cov, log_det_lambda) = spd_inverse(&lambda).map_err(|_| {
                    Error::Domain("prior precision plus A is not positive definite".into())
                })?;
                let h: Vec<T> = g.precision_mean.iter().zip(b).map(|(&p, &x)| p + x).collect();
                let mean = cov.mul_vec(&h);
                let half = T::lit(0.5);
                let log_z = half * crate::linalg::dot(&h, &mean)
                    - half * g.mean_quad
                    - half * g.log_det_cov
                    - half * log_det_lambda;
                Ok(Denoised {
                    mean,
                    covariance: cov,
                    log_z,
                })
            }
        }
    }

    /// Largest deviation between the returned covariance and a central
    /// finite difference of the mean in `B`.
    pub fn denoise_jacobian_check(&self, a: &Matrix<T>, b: &[T], step: T) -> Result<T> {
        if !(step > T::zero()) {
            return Err(Error::param("step", "must be positive"));
        }
        let base = self.denoise(a, b)?;
        let r = self.rank();
        let mut worst = T::zero();
        for j in 0..r {
            let mut plus = b.to_vec();
            let mut minus = b.to_vec();
            plus[j] += step;
            minus[j] -= step;
            let fp = self.denoise(a, &plus)?.mean;
            let fm = self.denoise(a, &minus)?.mean;
            for i in 0..r {
                let fd = (fp[i] - fm[i]) / (T::lit(2.0) * step);
                worst = worst.max((base.covariance[(i, j)] - fd).abs());
            }
        }
        Ok(worst)
    }
}

fn log_cosh<T: Scalar>(h: T) -> T {
    // log cosh h = |h| + log(1 + e^{-2|h|}) - log 2
    let a = h.abs();
    a + (-T::lit(2.0) * a).exp().ln_1p() - T::LN_2()
}

fn community_denoise<T: Scalar>(r: usize, a: &Matrix<T>, b: &[T]) -> Denoised<T> {
    let half = T::lit(0.5);
    let logits: Vec<T> = (0..r).map(|k| b[k] - half * a[(k, k)]).collect();
    let lse = log_sum_exp(&logits);
    let mean: Vec<T> = logits.iter().map(|&l| (l - lse).exp()).collect();
    let mut covariance = Matrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            let d = if i == j { mean[i] } else { T::zero() };
            covariance[(i, j)] = d - mean[i] * mean[j];
        }
    }
    Denoised {
        mean,
        covariance,
        log_z: lse - T::from_usize_lossy(r).ln(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn zero(r: usize) -> Matrix<f64> {
        Matrix::zeros(r, r)
    }

    #[test]
    fn community_examples() {
        let p = Prior::community(2).unwrap();
        let d = p.denoise(&zero(2), &[0.0, 0.0]).unwrap();
        assert_eq!(d.mean, vec![0.5, 0.5]);
        let d = p.denoise(&zero(2), &[2f64.ln(), 0.0]).unwrap();
        assert!((d.mean[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.mean[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn community_survives_huge_fields() {
        let p = Prior::community(3).unwrap();
        let d = p.denoise(&zero(3), &[1e4, -1e4, 0.0]).unwrap();
        assert!(d.mean.iter().all(|m| m.is_finite()));
        assert!((d.mean[0] - 1.0).abs() < 1e-15);
        assert!(d.log_z.is_finite());
    }

    #[test]
    fn gaussian_example() {
        let p = Prior::<f64>::standard_gaussian(2);
        let d = p.denoise(&Matrix::identity(2), &[1.0, 0.0]).unwrap();
        assert!((d.mean[0] - 0.5).abs() < 1e-15);
        assert!(d.mean[1].abs() < 1e-15);
        assert!(d.covariance.max_abs_diff(&Matrix::identity(2).scale(0.5)) < 1e-15);
        // (I + A) not PD
        assert!(matches!(
            p.denoise(&Matrix::identity(2).scale(-2.0), &[0.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gaussian_log_z_matches_one_dimensional_quadrature() {
        let p = Prior::gaussian(vec![0.3], Matrix::filled(1, 1, 1.7)).unwrap();
        let a = Matrix::filled(1, 1, 0.4);
        let b = [0.9];
        let d = p.denoise(&a, &b).unwrap();
        // brute-force trapezoid over a wide window
        let (lo, hi, steps) = (-30.0, 30.0, 200_000);
        let h = (hi - lo) / steps as f64;
        let mut z = 0.0;
        let mut zx = 0.0;
        for k in 0..=steps {
            let x = lo + k as f64 * h;
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            let dens = (-(x - 0.3f64).powi(2) / (2.0 * 1.7)).exp() / (2.0 * std::f64::consts::PI * 1.7).sqrt();
            let t = w * dens * (0.9 * x - 0.2 * x * x).exp();
            z += t * h;
            zx += t * h * x;
        }
        assert!((d.log_z - z.ln()).abs() < 1e-9);
        assert!((d.mean[0] - zx / z).abs() < 1e-9);
    }

    #[test]
    fn rademacher_example() {
        let p = Prior::<f64>::Rademacher;
        let d = p.denoise(&zero(1), &[0.5]).unwrap();
        let t = 0.5f64.tanh();
        assert!((d.covariance[(0, 0)] - (1.0 - t * t)).abs() < 1e-15);
        assert!((d.log_z - 0.5f64.cosh().ln()).abs() < 1e-15);
    }

    #[test]
    fn jacobian_check_examples() {
        let mut rng = stream(3, "jac", 0);
        let p = Prior::community(3).unwrap();
        let a = Matrix::from_fn(3, 3, |i, j| if i == j { 0.4 + i as f64 } else { 0.1 });
        let b: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        assert!(p.denoise_jacobian_check(&a, &b, 1e-5).unwrap() <= 1e-6);
        let g = Prior::standard_gaussian(2);
        let a = Matrix::from_rows(&[vec![0.7, 0.2], vec![0.2, 1.1]]).unwrap();
        assert!(g.denoise_jacobian_check(&a, &[0.3, -2.0], 1e-3).unwrap() <= 1e-8);
        assert!(p.denoise_jacobian_check(&a, &b, 0.0).is_err());
    }

    #[test]
    fn community_samples_are_one_hot_and_uniform() {
        let p = Prior::<f64>::community(3).unwrap();
        let mut rng = stream(5, "prior", 0);
        let n = 30_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let x = p.sample(&mut rng);
            assert_eq!(x.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(x.iter().filter(|&&v| v == 0.0).count(), 2);
            counts[x.iter().position(|&v| v == 1.0).unwrap()] += 1;
        }
        let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 3.0).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn gaussian_and_rademacher_sampling() {
        let mut rng = stream(6, "prior", 0);
        let g = Prior::<f64>::standard_gaussian(2);
        let n = 50_000;
        let mut c = Matrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            let x = g.sample(&mut rng);
            c = c.add(&Matrix::outer(&x, &x));
        }
        assert!(c.scale(1.0 / n as f64).max_abs_diff(&Matrix::identity(2)) < 0.03);

        let r = Prior::<f64>::Rademacher;
        let xs: Vec<f64> = (0..n).map(|_| r.sample(&mut rng)[0]).collect();
        assert!(xs.iter().all(|&x| x == 1.0 || x == -1.0));
        assert!((xs.iter().sum::<f64>() / n as f64).abs() < 0.02);
    }

    #[test]
    fn serde_round_trip_keeps_cached_factors() {
        let p = Prior::gaussian(vec![0.5, -1.0], Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap()).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let back: Prior<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
        let c: Prior<f64> = serde_json::from_str(r#"{"kind":"community","groups":4}"#).unwrap();
        assert_eq!(c.rank(), 4);
    }
}
