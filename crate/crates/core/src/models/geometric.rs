use serde::{Deserialize, Serialize};

use crate::distributions::{DistributionSpec, ProposalType};
use crate::runtime::{ExecutionHandle, ModelProgram, ObservationKind, RuntimeError};
use crate::trace::{Address, Observations, Trace};

/// Flips a coin at address `"flip"` until it lands on 1, then observes the
/// number of tails under `Normal(tails, noise)`. The trace length is
/// unbounded, so late instances of `"flip"` are rarely seen in training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometric {
    pub stop_probability: f64,
    pub noise: f64,
}

impl Default for Geometric {
    fn default() -> Self {
        Geometric { stop_probability: 0.5, noise: 1.0 }
    }
}

impl ModelProgram for Geometric {
    fn id(&self) -> String {
        format!("geometric(p={},noise={})", self.stop_probability, self.noise)
    }

    fn observe_count(&self) -> usize {
        1
    }

    fn observation_kind(&self) -> ObservationKind {
        ObservationKind::Real
    }

    fn address_table(&self) -> Vec<(Address, ProposalType)> {
        vec![(Address::new("flip").unwrap(), ProposalType::Categorical { categories: 2 })]
    }

    fn feature_dim(&self) -> usize {
        1
    }

    fn observation_features(&self, obs: &Observations) -> Vec<f64> {
        obs.reals().collect()
    }

    fn run(&self, h: &mut ExecutionHandle<'_>) -> Result<(), RuntimeError> {
        let coin = DistributionSpec::categorical(vec![1.0 - self.stop_probability, self.stop_probability])?;
        let mut tails = 0u32;
        while h.sample_category("flip", &coin)? == 0 {
            tails += 1;
        }
        h.observe(&DistributionSpec::normal(tails as f64, self.noise)?)?;
        Ok(())
    }

    fn summary_names(&self) -> Vec<String> {
        vec!["tails".into()]
    }

    fn summarize(&self, trace: &Trace) -> Vec<f64> {
        vec![trace.entries.len().saturating_sub(1) as f64]
    }
}
