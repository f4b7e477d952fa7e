//! Experiment configuration files (TOML, one experiment per file).
//!
//! Every section has defaults, so an empty file is a valid configuration.
//! The resolved configuration is written into each output artifact.

use std::path::{Path, PathBuf};

use lowrank_amp::amp::AmpOptions;
use lowrank_amp::spectral::PowerOptions;
use lowrank_amp::state_evolution::QuadratureSpec;
use lowrank_amp::transitions::TransitionOptions;
use lowrank_amp::{Channel, Matrix, Model, Prior};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::from(e).with_context(&format!("reading {}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

impl CliError {
    fn with_context(mut self, ctx: &str) -> Self {
        self.message = format!("{ctx}: {}", self.message);
        self
    }
}

fn default_prior() -> Prior<f64> {
    Prior::Community { groups: 2 }
}

/// Channel family; a parameter left out is derived from `delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSpec {
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        variance: Option<f64>,
    },
    Sbm {
        p_out: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mu: Option<f64>,
    },
    Exponential {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
    },
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec::Gaussian { variance: None }
    }
}

impl ChannelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ChannelSpec::Gaussian { .. } => "gaussian",
            ChannelSpec::Sbm { .. } => "sbm",
            ChannelSpec::Exponential { .. } => "exponential",
        }
    }

    /// The channel at noise level `delta`, or with its own parameter.
    pub fn resolve(&self, delta: Option<f64>) -> CliResult<Channel<f64>> {
        let need = |field: &str| CliError::field(field, "give it explicitly or set `delta`");
        let ch = match *self {
            ChannelSpec::Gaussian { variance } => {
                Channel::gaussian(variance.or(delta).ok_or_else(|| need("variance"))?)?
            }
            ChannelSpec::Sbm { p_out, mu: Some(mu) } => Channel::sbm(p_out, mu)?,
            ChannelSpec::Sbm { p_out, mu: None } => {
                Channel::sbm_with_delta(p_out, delta.ok_or_else(|| need("mu"))?)?
            }
            ChannelSpec::Exponential { scale } => match (scale, delta) {
                (Some(s), _) => Channel::exponential(s)?,
                (None, Some(d)) if d > 0.0 => Channel::exponential(d.sqrt())?,
                (None, Some(_)) => return Err(CliError::field("delta", "must be positive")),
                (None, None) => return Err(need("scale")),
            },
        };
        if let Some(d) = delta {
            let got = ch.inverse_fisher();
            if (got - d).abs() > 1e-12 * d.abs().max(1.0) {
                return Err(CliError::field(
                    "delta",
                    format!("channel parameters give Δ = {got}, not {d}"),
                ));
            }
        }
        Ok(ch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceConfig {
    pub model: Model,
    pub n: usize,
    /// `m/n` for the UV model.
    pub alpha: f64,
    pub delta: Option<f64>,
    #[serde(default = "default_prior")]
    pub prior: Prior<f64>,
    /// UV model only; defaults to `prior`.
    pub prior_v: Option<Prior<f64>>,
    pub channel: ChannelSpec,
    /// XKX model only; the identity when absent.
    pub coupling: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            model: Model::Xkx,
            n: 1000,
            alpha: 1.0,
            delta: None,
            prior: default_prior(),
            prior_v: None,
            channel: ChannelSpec::default(),
            coupling: None,
            seed: 0,
        }
    }
}

impl InstanceConfig {
    pub fn coupling(&self) -> CliResult<Matrix<f64>> {
        coupling_matrix(self.coupling.as_ref(), self.prior.rank())
    }

    pub fn prior_v(&self) -> Prior<f64> {
        self.prior_v.clone().unwrap_or_else(|| self.prior.clone())
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.n < 2 {
            return Err(CliError::field("n", "need at least two rows"));
        }
        if !(self.alpha > 0.0) {
            return Err(CliError::field("alpha", "must be positive"));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0) {
                return Err(CliError::field("delta", "must be positive"));
            }
        }
        self.prior.validate()?;
        if let Some(pv) = &self.prior_v {
            pv.validate()?;
            if pv.rank() != self.prior.rank() {
                return Err(CliError::field("prior_v", "rank differs from `prior`"));
            }
        }
        self.coupling()?;
        self.channel.resolve(self.delta)?;
        Ok(())
    }
}

pub fn coupling_matrix(rows: Option<&Vec<Vec<f64>>>, r: usize) -> CliResult<Matrix<f64>> {
    match rows {
        None => Ok(Matrix::identity(r)),
        Some(rows) => {
            let k = Matrix::from_rows(rows).map_err(|e| CliError::field("coupling", e))?;
            if k.shape() != (r, r) {
                return Err(CliError::field("coupling", format!("must be {r}x{r}")));
            }
            if !k.is_symmetric() {
                return Err(CliError::field("coupling", "must be symmetric"));
            }
            Ok(k)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub instance: InstanceConfig,
    /// Leave the planted factors out of the file.
    pub blind: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmpConfig {
    /// Read the instance from this container instead of generating one.
    pub instance_file: Option<PathBuf>,
    pub instance: InstanceConfig,
    /// Priors used by the algorithm; default to the generating ones.
    pub prior: Option<Prior<f64>>,
    pub prior_v: Option<Prior<f64>>,
    pub amp: AmpOptions<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    Linear,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
    pub spacing: Spacing,
    /// Explicit values; overrides the range when non-empty.
    pub values: Vec<f64>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            start: 0.05,
            stop: 0.5,
            count: 10,
            spacing: Spacing::Linear,
            values: Vec::new(),
        }
    }
}

impl Sweep {
    pub fn points(&self) -> CliResult<Vec<f64>> {
        let pts = if !self.values.is_empty() {
            self.values.clone()
        } else {
            if self.count == 0 {
                return Err(CliError::field("count", "must be at least 1"));
            }
            if !(self.start.is_finite() && self.stop.is_finite()) {
                return Err(CliError::field("start", "range must be finite"));
            }
            let last = (self.count.max(2) - 1) as f64;
            match self.spacing {
                Spacing::Linear => (0..self.count)
                    .map(|i| self.start + (self.stop - self.start) * i as f64 / last)
                    .collect(),
                Spacing::Log => {
                    if !(self.start > 0.0 && self.stop > 0.0) {
                        return Err(CliError::field("start", "log spacing needs a positive range"));
                    }
                    let (a, b) = (self.start.ln(), self.stop.ln());
                    (0..self.count).map(|i| (a + (b - a) * i as f64 / last).exp()).collect()
                }
            }
        };
        if let Some(bad) = pts.iter().find(|&&d| !(d > 0.0)) {
            return Err(CliError::field("delta", format!("sweep value {bad} is not positive")));
        }
        Ok(pts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Uninformative,
    Informative,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Uninformative => "uninformative",
            Branch::Informative => "informative",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// `scalar` for community priors with identity coupling, else `matrix`.
    #[default]
    Auto,
    /// The one-parameter community recursion on `b`.
    Scalar,
    /// The full r×r recursion on `(Q, M)`.
    Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeConfig {
    pub model: Model,
    #[serde(default = "default_prior")]
    pub prior: Prior<f64>,
    pub prior_v: Option<Prior<f64>>,
    pub coupling: Option<Vec<Vec<f64>>>,
    pub alpha: f64,
    pub sweep: Sweep,
    pub quadrature: QuadratureSpec,
    pub solver: Solver,
    pub branches: Vec<Branch>,
    /// Overlap scale of the uninformative start.
    pub init_scale: f64,
    pub tol: f64,
    pub t_max: usize,
    pub free_energy: bool,
    /// Report `Δ r²` in the `delta` column.
    pub rescale: bool,
}

impl Default for SeConfig {
    fn default() -> Self {
        Self {
            model: Model::Xkx,
            prior: default_prior(),
            prior_v: None,
            coupling: None,
            alpha: 1.0,
            sweep: Sweep::default(),
            quadrature: QuadratureSpec::default(),
            solver: Solver::Auto,
            branches: vec![Branch::Uninformative, Branch::Informative],
            init_scale: 1e-6,
            tol: 1e-9,
            t_max: 5000,
            free_energy: true,
            rescale: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub ranks: Vec<usize>,
    pub transition: TransitionOptions,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            ranks: vec![2, 3, 5, 10],
            transition: TransitionOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    pub instance_file: Option<PathBuf>,
    pub instance: InstanceConfig,
    pub k: usize,
    pub power: PowerOptions<f64>,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            instance_file: None,
            instance: InstanceConfig::default(),
            k: 1,
            power: PowerOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub n: usize,
    #[serde(default = "default_prior")]
    pub prior: Prior<f64>,
    pub coupling: Option<Vec<Vec<f64>>>,
    /// Channel families run at every Δ of the sweep.
    pub channels: Vec<ChannelSpec>,
    pub sweep: Sweep,
    pub amp: AmpOptions<f64>,
    /// Quadrature of the state-evolution reference.
    pub quadrature: QuadratureSpec,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            prior: default_prior(),
            coupling: None,
            channels: vec![
                ChannelSpec::Gaussian { variance: None },
                ChannelSpec::Sbm { p_out: 0.5, mu: None },
            ],
            sweep: Sweep::default(),
            amp: AmpOptions::default(),
            quadrature: QuadratureSpec::default(),
            seed: 0,
        }
    }
}
