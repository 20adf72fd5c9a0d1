use serde::{Deserialize, Serialize};

use crate::distributions::{DistributionSpec, ProposalType};
use crate::runtime::{ExecutionHandle, ModelProgram, ObservationKind, RuntimeError};
use crate::trace::{Address, Observations, Trace};

/// `mu ~ Normal(mu0, sigma0)`, then `n` observations `y ~ Normal(mu, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConjugateGaussian {
    pub prior_mean: f64,
    pub prior_stddev: f64,
    pub likelihood_stddev: f64,
    pub observations: usize,
}

impl Default for ConjugateGaussian {
    fn default() -> Self {
        ConjugateGaussian { prior_mean: 0.0, prior_stddev: 1.0, likelihood_stddev: 1.0, observations: 3 }
    }
}

impl ConjugateGaussian {
    pub fn new(prior_mean: f64, prior_stddev: f64, likelihood_stddev: f64, observations: usize) -> Self {
        ConjugateGaussian { prior_mean, prior_stddev, likelihood_stddev, observations }
    }

    /// Closed-form posterior `(mean, stddev)` of `mu` given real observations.
    pub fn posterior(&self, ys: &[f64]) -> (f64, f64) {
        let prior_precision = 1.0 / (self.prior_stddev * self.prior_stddev);
        let lik_precision = 1.0 / (self.likelihood_stddev * self.likelihood_stddev);
        let precision = prior_precision + ys.len() as f64 * lik_precision;
        let sum: f64 = ys.iter().sum();
        let mean = (self.prior_mean * prior_precision + sum * lik_precision) / precision;
        (mean, precision.sqrt().recip())
    }

    pub fn posterior_for(&self, obs: &Observations) -> (f64, f64) {
        self.posterior(&obs.reals().collect::<Vec<_>>())
    }
}

impl ModelProgram for ConjugateGaussian {
    fn id(&self) -> String {
        format!(
            "conjugate(mu0={},sigma0={},sigma={},n={})",
            self.prior_mean, self.prior_stddev, self.likelihood_stddev, self.observations
        )
    }

    fn observe_count(&self) -> usize {
        self.observations
    }

    fn observation_kind(&self) -> ObservationKind {
        ObservationKind::Real
    }

    fn address_table(&self) -> Vec<(Address, ProposalType)> {
        vec![(Address::new("mu").unwrap(), ProposalType::Normal)]
    }

    fn feature_dim(&self) -> usize {
        self.observations
    }

    fn observation_features(&self, obs: &Observations) -> Vec<f64> {
        obs.reals().collect()
    }

    fn run(&self, h: &mut ExecutionHandle<'_>) -> Result<(), RuntimeError> {
        let mu = h.sample_real("mu", &DistributionSpec::normal(self.prior_mean, self.prior_stddev)?)?;
        let lik = DistributionSpec::normal(mu, self.likelihood_stddev)?;
        for _ in 0..self.observations {
            h.observe(&lik)?;
        }
        Ok(())
    }

    fn summary_names(&self) -> Vec<String> {
        vec!["mu".into()]
    }

    fn summarize(&self, trace: &Trace) -> Vec<f64> {
        vec![trace.value_at("mu", 1).and_then(|v| v.as_real()).unwrap_or(f64::NAN)]
    }
}
