//! Output channels `P_out(y|w)`.
//!
//! AMP only ever sees a channel through two things: the score `∂_w log
//! P_out(y|w)` at `w = 0`, applied entrywise to the observations, and the
//! inverse Fisher information `Δ`. Both are closed-form here.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{standard_normal, uniform01};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Channel<T> {
    /// `y = w + sqrt(variance) ξ`
    Gaussian { variance: T },
    /// Dense stochastic block model: `P(y=1|w) = p_out + μ w`.
    Sbm { p_out: T, mu: T },
    /// `y = w + Laplace(scale)`, density `exp(-|y-w|/λ) / 2λ`.
    Exponential { scale: T },
}

impl<T: Scalar> Channel<T> {
    pub fn gaussian(variance: T) -> Result<Self> {
        let c = Channel::Gaussian { variance };
        c.validate()?;
        Ok(c)
    }

    pub fn sbm(p_out: T, mu: T) -> Result<Self> {
        let c = Channel::Sbm { p_out, mu };
        c.validate()?;
        Ok(c)
    }

    /// The SBM channel whose inverse Fisher information equals `delta`.
    pub fn sbm_with_delta(p_out: T, delta: T) -> Result<Self> {
        if !(delta > T::zero()) {
            return Err(Error::param("delta", "must be positive"));
        }
        Self::sbm(p_out, (p_out * (T::one() - p_out) / delta).sqrt())
    }

    pub fn exponential(scale: T) -> Result<Self> {
        let c = Channel::Exponential { scale };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(field, format!("must be positive and finite, got {v}")))
            }
        };
        match *self {
            Channel::Gaussian { variance } => positive("variance", variance),
            Channel::Exponential { scale } => positive("scale", scale),
            Channel::Sbm { p_out, mu } => {
                if !(p_out > T::zero() && p_out < T::one()) {
                    return Err(Error::param(
                        "p_out",
                        format!("must lie strictly inside (0, 1), got {p_out}"),
                    ));
                }
                positive("mu", mu)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Channel::Gaussian { .. } => "gaussian",
            Channel::Sbm { .. } => "sbm",
            Channel::Exponential { .. } => "exponential",
        }
    }

    /// `g(y, w) = log P_out(y|w)`; `-inf` off the support.
    pub fn log_likelihood(&self, y: T, w: T) -> T {
        match *self {
            Channel::Gaussian { variance } => {
                let d = y - w;
                -d * d / (T::lit(2.0) * variance)
                    - T::lit(0.5) * (T::lit(2.0) * T::PI() * variance).ln()
            }
            Channel::Sbm { p_out, mu } => {
                let p = p_out + mu * w;
                if y == T::one() {
                    p.ln()
                } else if y == T::zero() {
                    (T::one() - p).ln()
                } else {
                    T::neg_infinity()
                }
            }
            Channel::Exponential { scale } => {
                -(y - w).abs() / scale - (T::lit(2.0) * scale).ln()
            }
        }
    }

    /// Score `∂_w log P_out(y|w)` at `w = 0`.
    pub fn score(&self, y: T) -> T {
        match *self {
            Channel::Gaussian { variance } => y / variance,
            Channel::Sbm { p_out, mu } => {
                if y == T::one() {
                    mu / p_out
                } else {
                    -mu / (T::one() - p_out)
                }
            }
            Channel::Exponential { scale } => {
                // a.e. derivative; the kink at y = 0 scores 0
                if y > T::zero() {
                    T::one() / scale
                } else if y < T::zero() {
                    -T::one() / scale
                } else {
                    T::zero()
                }
            }
        }
    }

    /// `∂²_w log P_out(y|w)` at `w = 0`. Zero almost everywhere for the
    /// exponential channel, whose curvature is concentrated at the kink.
    pub fn score_slope(&self, y: T) -> T {
        match *self {
            Channel::Gaussian { variance } => -T::one() / variance,
            Channel::Sbm { p_out, mu } => {
                if y == T::one() {
                    -(mu / p_out).powi(2)
                } else {
                    -(mu / (T::one() - p_out)).powi(2)
                }
            }
            Channel::Exponential { .. } => T::zero(),
        }
    }

    /// Inverse Fisher information at `w = 0`.
    pub fn inverse_fisher(&self) -> T {
        match *self {
            Channel::Gaussian { variance } => variance,
            Channel::Sbm { p_out, mu } => p_out * (T::one() - p_out) / (mu * mu),
            Channel::Exponential { scale } => scale * scale,
        }
    }

    /// Success probability of the SBM channel at `w`, checked to be a probability.
    fn edge_probability(p_out: T, mu: T, w: T) -> Result<T> {
        let p = p_out + mu * w;
        if p < T::zero() || p > T::one() || !p.is_finite() {
            return Err(Error::param(
                "mu",
                format!("edge probability p_out + mu*w = {p} leaves [0, 1] at w = {w}"),
            ));
        }
        Ok(p)
    }

    /// Draws `y ~ P_out(·|w)`.
    pub fn sample<R: Rng + ?Sized>(&self, w: T, rng: &mut R) -> Result<T> {
        Ok(match *self {
            Channel::Gaussian { variance } => w + variance.sqrt() * standard_normal::<T, _>(rng),
            Channel::Sbm { p_out, mu } => {
                let p = Self::edge_probability(p_out, mu, w)?;
                if uniform01(rng) < p.as_f64() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Channel::Exponential { scale } => {
                // Laplace by inversion: ±λ·Exp(1)
                let u = uniform01(rng);
                let e = T::lit(-(1.0 - uniform01(rng)).ln());
                if u < 0.5 {
                    w - scale * e
                } else {
                    w + scale * e
                }
            }
        })
    }

    pub fn in_support(&self, y: T) -> bool {
        match self {
            Channel::Sbm { .. } => y == T::zero() || y == T::one(),
            _ => y.is_finite(),
        }
    }

    /// Entrywise score of an observation matrix.
    pub fn score_matrix(&self, y: &Matrix<T>) -> Result<ScoreMatrix<T>> {
        if let Some(bad) = y.as_slice().iter().find(|&&v| !self.in_support(v)) {
            return Err(Error::param(
                "observations",
                format!("value {bad} outside the {} channel support", self.name()),
            ));
        }
        let cols = y.cols().max(1);
        let mut values = Matrix::zeros(y.rows(), y.cols());
        values
            .as_mut_slice()
            .par_chunks_mut(cols)
            .zip(y.as_slice().par_chunks(cols))
            .for_each(|(out, row)| {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = self.score(v);
                }
            });
        Ok(ScoreMatrix {
            symmetric: y.is_symmetric(),
            values,
        })
    }
}

/// Fisher score matrix `S_ij = ∂_w log P_out(y_ij|w)|_{w=0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<T> {
    pub values: Matrix<T>,
    pub symmetric: bool,
}

impl<T: Scalar> ScoreMatrix<T> {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn score_values() {
        let g = Channel::gaussian(0.25).unwrap();
        assert_eq!(g.score(1.0), 4.0);
        let s = Channel::sbm(0.5, 1.0).unwrap();
        assert_eq!(s.score(1.0), 2.0);
        assert_eq!(s.score(0.0), -2.0);
        let e = Channel::exponential(2.0).unwrap();
        assert_eq!(e.score(-0.7), -0.5);
        assert_eq!(e.score(0.0), 0.0);
    }

    #[test]
    fn exponential_score_matches_finite_difference() {
        let e = Channel::<f64>::exponential(2.0).unwrap();
        let h = 1e-6;
        for &y in &[-0.7, 0.3, 2.5] {
            let fd = (e.log_likelihood(y, h) - e.log_likelihood(y, -h)) / (2.0 * h);
            assert!((fd - e.score(y)).abs() < 1e-8, "y={y} fd={fd}");
        }
    }

    #[test]
    fn inverse_fisher_closed_forms() {
        assert_eq!(Channel::gaussian(0.3).unwrap().inverse_fisher(), 0.3);
        assert_eq!(Channel::sbm(0.5, 1.0).unwrap().inverse_fisher(), 0.25);
        assert!((Channel::<f64>::exponential(0.8).unwrap().inverse_fisher() - 0.64).abs() < 1e-15);
        let matched = Channel::<f64>::sbm_with_delta(0.3, 0.07).unwrap();
        assert!((matched.inverse_fisher() - 0.07).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(Channel::sbm(1.0, 1.0).is_err());
        assert!(Channel::sbm(0.0, 1.0).is_err());
        assert!(Channel::<f64>::gaussian(0.0).is_err());
        assert!(Channel::<f64>::exponential(-1.0).is_err());
        let s = Channel::sbm(0.5, 1.0).unwrap();
        let mut rng = stream(1, "t", 0);
        assert!(s.sample(0.6, &mut rng).is_err());
        assert!(s.sample(0.4, &mut rng).is_ok());
    }

    #[test]
    fn score_matrix_examples() {
        let g = Channel::gaussian(1.0).unwrap();
        let id = Matrix::<f64>::identity(2);
        assert_eq!(g.score_matrix(&id).unwrap().values, id);

        let s = Channel::sbm(0.5, 1.0).unwrap();
        let out = s.score_matrix(&id).unwrap();
        assert_eq!(out.values.to_rows(), vec![vec![2.0, -2.0], vec![-2.0, 2.0]]);
        assert!(out.symmetric);

        let e = Channel::exponential(1.0).unwrap();
        let y = Matrix::from_rows(&[vec![0.3, -0.1], vec![-0.1, 2.0]]).unwrap();
        assert_eq!(e.score_matrix(&y).unwrap().values.to_rows(), vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);

        assert!(s.score_matrix(&Matrix::filled(2, 2, 0.5)).is_err());
    }

    #[test]
    fn gaussian_score_matrix_is_scaled_observation() {
        let g = Channel::gaussian(0.37).unwrap();
        let y = Matrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) as f64).sin());
        let s = g.score_matrix(&y).unwrap();
        for (a, b) in s.values.as_slice().iter().zip(y.as_slice()) {
            assert_eq!(*a, b / 0.37);
        }
    }

    #[test]
    fn sampling_moments() {
        let mut rng = stream(11, "moments", 0);
        let n = 200_000;

        let g = Channel::gaussian(0.25).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| g.sample(0.0, &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005);
        assert!((var - 0.25).abs() < 0.005);

        let s = Channel::sbm(0.5, 1.0).unwrap();
        let ones = (0..n).filter(|_| s.sample(0.0, &mut rng).unwrap() == 1.0).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.005);

        // two-sided exponential: E y = 0, E|y| = λ
        let e = Channel::exponential(1.0).unwrap();
        let ys: Vec<f64> = (0..n).map(|_| e.sample(0.0, &mut rng).unwrap()).collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let abs_mean = ys.iter().map(|y| y.abs()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((abs_mean - 1.0).abs() < 0.01);
    }
}
