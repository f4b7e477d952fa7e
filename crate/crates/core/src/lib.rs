//! Approximate message passing (AMP) and state evolution for low-rank
//! matrix estimation from observations passed through a nonlinear channel.
//!
//! Two models are supported:
//!
//! * `X K Xᵀ`: `Y_ij ~ P_out(· | x_iᵀ K x_j / √n)` with symmetric `Y`;
//! * `U Vᵀ`: `Y_ij ~ P_out(· | u_iᵀ v_j / √n)` with rectangular `Y`.
//!
//! Every channel enters the algorithms only through its score matrix
//! `S_ij = ∂_w log P_out(Y_ij | w)` at `w = 0` and its inverse Fisher
//! information `Δ`. The numeric core is generic over [`Scalar`]; the
//! `*64` aliases below are the usual entry points.

// `!(x > 0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod amp;
pub mod channels;
pub mod error;
pub mod instances;
pub mod io;
pub mod linalg;
pub mod priors;
pub mod rng;
pub mod scalar;
pub mod spectral;
pub mod state_evolution;
pub mod transitions;

pub use channels::{Channel, ScoreMatrix};
pub use error::{Error, Result};
pub use instances::{generate_uv, generate_xkx, Model, PlantedInstance};
pub use linalg::Matrix;
pub use priors::{Denoised, Prior};
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Channel64 = Channel<f64>;
pub type Channel32 = Channel<f32>;
pub type Prior64 = Prior<f64>;
pub type Prior32 = Prior<f32>;
pub type Instance64 = PlantedInstance<f64>;
pub type Instance32 = PlantedInstance<f32>;
