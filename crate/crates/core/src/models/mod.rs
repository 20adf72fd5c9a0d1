//! Bundled model programs and their exact-inference oracles.

mod conjugate;
mod geometric;
mod gmm;
mod two_coin;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conjugate::ConjugateGaussian;
pub use geometric::Geometric;
pub use gmm::{sort_clusters, summarize_observations, Cluster, GaussianMixture, HistogramSummary, MEAN_HIGH, MEAN_LOW};
pub use two_coin::{CoinPosterior, TwoCoin};

use crate::runtime::ModelProgram;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown model '{0}' (known: conjugate, two-coin, gmm, gmm-k<N>, geometric)")]
    Unknown(String),
    #[error("invalid model parameters: {0}")]
    Invalid(String),
}

/// A bundled model together with its parameters, as read from a config file
/// (`name = "..."` plus the model's own fields).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ModelSpec {
    Conjugate(ConjugateGaussian),
    TwoCoin(TwoCoin),
    Gmm(GaussianMixture),
    Geometric(Geometric),
}

impl ModelSpec {
    /// Default parameters for a model name. `gmm-k3` is the mixture with the
    /// number of clusters fixed to 3.
    pub fn from_name(name: &str) -> Result<Self, ModelError> {
        Ok(match name {
            "conjugate" => ModelSpec::Conjugate(ConjugateGaussian::default()),
            "two-coin" => ModelSpec::TwoCoin(TwoCoin::default()),
            "gmm" => ModelSpec::Gmm(GaussianMixture::default()),
            "geometric" => ModelSpec::Geometric(Geometric::default()),
            _ => match name.strip_prefix("gmm-k").and_then(|k| k.parse::<u32>().ok()) {
                Some(k) if k > 0 => ModelSpec::Gmm(GaussianMixture::fixed(k)),
                _ => return Err(ModelError::Unknown(name.to_string())),
            },
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Conjugate(_) => "conjugate",
            ModelSpec::TwoCoin(_) => "two-coin",
            ModelSpec::Gmm(_) => "gmm",
            ModelSpec::Geometric(_) => "geometric",
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Invalid(m.to_string()));
        match self {
            ModelSpec::Conjugate(m) => {
                if !(m.prior_stddev > 0.0 && m.likelihood_stddev > 0.0) {
                    return bad("conjugate standard deviations must be positive");
                }
                if m.observations == 0 {
                    return bad("conjugate model needs at least one observation");
                }
            }
            ModelSpec::TwoCoin(m) => {
                let probs = std::iter::once(m.p1).chain(m.likelihood.iter().flatten().copied());
                if probs.into_iter().any(|p| !(0.0..=1.0).contains(&p)) {
                    return bad("two-coin probabilities must lie in [0, 1]");
                }
                if m.likelihood.iter().any(|row| (row[0] + row[1] - 1.0).abs() > 1e-9) {
                    return bad("two-coin likelihood rows must sum to 1");
                }
                if m.observations == 0 || m.observations > 2 {
                    return bad("two-coin model supports 1 or 2 observations");
                }
            }
            ModelSpec::Gmm(m) => {
                if m.max_clusters == 0 || m.fixed_clusters == Some(0) {
                    return bad("gmm needs at least one cluster");
                }
                if !(m.sigma_low > 0.0 && m.sigma_low < m.sigma_high) {
                    return bad("gmm sigma range must satisfy 0 < sigma_low < sigma_high");
                }
                if m.points == 0 || m.bins == 0 {
                    return bad("gmm needs points > 0 and bins > 0");
                }
            }
            ModelSpec::Geometric(m) => {
                if !(m.stop_probability > 0.0 && m.stop_probability <= 1.0 && m.noise > 0.0) {
                    return bad("geometric needs 0 < stop_probability <= 1 and noise > 0");
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn ModelProgram>, ModelError> {
        self.validate()?;
        Ok(match self {
            ModelSpec::Conjugate(m) => Box::new(*m),
            ModelSpec::TwoCoin(m) => Box::new(*m),
            ModelSpec::Gmm(m) => Box::new(*m),
            ModelSpec::Geometric(m) => Box::new(*m),
        })
    }
}
