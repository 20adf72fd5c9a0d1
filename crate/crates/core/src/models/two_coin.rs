use serde::{Deserialize, Serialize};

use crate::distributions::{log_sum_exp, DistributionSpec, ProposalType, SampleValue};
use crate::runtime::{ExecutionHandle, ModelProgram, ObservationKind, RuntimeError};
use crate::trace::{Address, Observations, Trace};

/// A hidden coin `x ~ Bernoulli(p1)`, then `n` observed coins with
/// `P(y = j | x = i) = likelihood[i][j]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoCoin {
    pub p1: f64,
    pub likelihood: [[f64; 2]; 2],
    pub observations: usize,
}

impl Default for TwoCoin {
    fn default() -> Self {
        TwoCoin { p1: 0.3, likelihood: [[0.9, 0.1], [0.2, 0.8]], observations: 1 }
    }
}

/// Exact posterior over the hidden coin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoinPosterior {
    /// `[P(x = 0 | y), P(x = 1 | y)]`.
    pub probs: [f64; 2],
    pub log_evidence: f64,
}

impl TwoCoin {
    /// Sums the joint over both values of the hidden coin.
    pub fn enumerate(&self, obs: &Observations) -> Result<CoinPosterior, RuntimeError> {
        let prior = [1.0 - self.p1, self.p1];
        let mut log_joint = [0.0; 2];
        for (x, lj) in log_joint.iter_mut().enumerate() {
            *lj = prior[x].ln();
            for y in &obs.values {
                let y = y
                    .as_category()
                    .filter(|c| *c < 2)
                    .ok_or_else(|| RuntimeError::Model(format!("coin observation {y:?} is not 0 or 1")))?;
                *lj += self.likelihood[x][y as usize].ln();
            }
        }
        let log_evidence = log_sum_exp(&log_joint);
        Ok(CoinPosterior {
            probs: [(log_joint[0] - log_evidence).exp(), (log_joint[1] - log_evidence).exp()],
            log_evidence,
        })
    }
}

impl ModelProgram for TwoCoin {
    fn id(&self) -> String {
        let l = self.likelihood;
        format!(
            "two-coin(p1={},lik=[[{},{}],[{},{}]],n={})",
            self.p1, l[0][0], l[0][1], l[1][0], l[1][1], self.observations
        )
    }

    fn observe_count(&self) -> usize {
        self.observations
    }

    fn observation_kind(&self) -> ObservationKind {
        ObservationKind::Category
    }

    fn address_table(&self) -> Vec<(Address, ProposalType)> {
        vec![(Address::new("coin").unwrap(), ProposalType::Categorical { categories: 2 })]
    }

    fn feature_dim(&self) -> usize {
        2 * self.observations
    }

    fn observation_features(&self, obs: &Observations) -> Vec<f64> {
        obs.values
            .iter()
            .flat_map(|v| match v {
                SampleValue::Category(0) => [1.0, 0.0],
                SampleValue::Category(1) => [0.0, 1.0],
                _ => [0.0, 0.0],
            })
            .collect()
    }

    fn run(&self, h: &mut ExecutionHandle<'_>) -> Result<(), RuntimeError> {
        let x = h.sample_category("coin", &DistributionSpec::categorical(vec![1.0 - self.p1, self.p1])?)?;
        let lik = DistributionSpec::categorical(self.likelihood[x as usize].to_vec())?;
        for _ in 0..self.observations {
            h.observe(&lik)?;
        }
        Ok(())
    }

    fn summary_names(&self) -> Vec<String> {
        vec!["coin".into()]
    }

    fn summarize(&self, trace: &Trace) -> Vec<f64> {
        vec![trace.value_at("coin", 1).and_then(|v| v.as_category()).map_or(f64::NAN, |c| c as f64)]
    }
}
