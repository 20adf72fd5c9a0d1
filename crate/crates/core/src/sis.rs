//! Sequential importance sampling over whole program traces.
//!
//! Each particle is one guided execution with its own random stream and, for
//! artifact proposals, its own LSTM session. There is no resampling: traces
//! are built in full and then weighted.

use std::io::Write;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::distributions::log_sum_exp;
use crate::neural::{ArtifactOracle, NeuralError, ProposalArtifact};
use crate::runtime::{execute, Execution, Mode, ModelProgram, RuntimeError};
use crate::trace::{Observations, Trace};

#[derive(Debug, Clone, Copy)]
pub enum Proposal<'a> {
    Prior,
    Artifact(&'a ProposalArtifact),
}

impl Proposal<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Proposal::Prior => "prior",
            Proposal::Artifact(_) => "artifact",
        }
    }
}

#[derive(Debug, Error)]
pub enum SisError {
    #[error("artifact was compiled for model {artifact}, not {model}")]
    ModelMismatch { artifact: String, model: String },
    #[error("particle count must be positive")]
    NoParticles,
    #[error("degenerate particle set: every weight is zero")]
    Degenerate,
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone)]
pub struct Particle {
    /// `None` when the execution failed.
    pub trace: Option<Trace>,
    pub log_weight: f64,
    /// Sample statements that fell back to the prior.
    pub fallbacks: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
}

/// `sum_n log g(y_n) + sum_t (log f(x_t) - log q(x_t))`. Entries without a
/// proposal density were drawn from the prior and contribute nothing.
pub fn log_weight(trace: &Trace) -> f64 {
    let mut w = trace.log_likelihood();
    for e in &trace.entries {
        if let Some(q) = e.proposal_log_pdf {
            w += e.prior_log_pdf - q;
        }
    }
    w
}

/// Rng for particle `k` of a run seeded with `seed`.
pub fn particle_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Runs `k` weighted executions of `model` conditioned on `obs`.
pub fn run_sis(
    model: &dyn ModelProgram,
    obs: &Observations,
    k: usize,
    proposal: Proposal<'_>,
    seed: u64,
) -> Result<ParticleSet, SisError> {
    if k == 0 {
        return Err(SisError::NoParticles);
    }
    if obs.len() != model.observe_count() {
        return Err(RuntimeError::ObservationCount { expected: model.observe_count(), got: obs.len() }.into());
    }
    let embedding = match proposal {
        Proposal::Prior => None,
        Proposal::Artifact(art) => {
            if art.model_id != model.id() {
                return Err(SisError::ModelMismatch { artifact: art.model_id.clone(), model: model.id() });
            }
            Some(art.observation_embedding(&model.observation_features(obs))?)
        }
    };

    let mut particles = Vec::with_capacity(k);
    for p in 0..k {
        let mut rng = particle_rng(seed, p);
        let result: Result<Execution, RuntimeError> = match (proposal, &embedding) {
            (Proposal::Artifact(art), Some(emb)) => {
                let mut oracle = ArtifactOracle::new(art, emb);
                execute(model, Mode::Guided, Some(obs), Some(&mut oracle), &mut rng)
            }
            _ => execute(model, Mode::Prior, Some(obs), None, &mut rng),
        };
        particles.push(match result {
            Ok(ex) => Particle {
                log_weight: log_weight(&ex.trace),
                fallbacks: ex.fallbacks,
                trace: Some(ex.trace),
                error: None,
            },
            Err(e) => {
                warn!("particle {p} failed: {e}");
                Particle { trace: None, log_weight: f64::NEG_INFINITY, fallbacks: 0, error: Some(e.to_string()) }
            }
        });
    }
    let set = ParticleSet { particles };
    let fallbacks = set.fallback_count();
    if fallbacks > 0 {
        info!("{fallbacks} sample statements fell back to the prior across {k} particles");
    }
    Ok(set)
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight).collect()
    }

    /// Normalized weights, summing to one.
    pub fn normalized_weights(&self) -> Result<Vec<f64>, SisError> {
        let lw = self.log_weights();
        let lse = log_sum_exp(&lw);
        if !lse.is_finite() {
            return Err(SisError::Degenerate);
        }
        Ok(lw.iter().map(|w| (w - lse).exp()).collect())
    }

    /// Weighted average of `zeta` over particles with nonzero weight.
    pub fn estimate_expectation<F>(&self, zeta: F) -> Result<Vec<f64>, SisError>
    where
        F: Fn(&Trace) -> Vec<f64>,
    {
        let weights = self.normalized_weights()?;
        let mut acc: Vec<f64> = Vec::new();
        for (p, w) in self.particles.iter().zip(weights) {
            let Some(trace) = p.trace.as_ref().filter(|_| w > 0.0) else { continue };
            let z = zeta(trace);
            if acc.is_empty() {
                acc = vec![0.0; z.len()];
            }
            for (a, v) in acc.iter_mut().zip(z) {
                *a += w * v;
            }
        }
        Ok(acc)
    }

    /// `(sum w)^2 / sum w^2`, in `[1, K]`.
    pub fn effective_sample_size(&self) -> Result<f64, SisError> {
        let lw = self.log_weights();
        let num = 2.0 * log_sum_exp(&lw);
        if !num.is_finite() {
            return Err(SisError::Degenerate);
        }
        let doubled: Vec<f64> = lw.iter().map(|w| 2.0 * w).collect();
        Ok((num - log_sum_exp(&doubled)).exp())
    }

    /// `log((1/K) sum w)`, the importance-sampling evidence estimate.
    pub fn log_evidence(&self) -> f64 {
        log_sum_exp(&self.log_weights()) - (self.len() as f64).ln()
    }

    /// The particle with the largest weight; ties go to the lowest index.
    pub fn highest_weight(&self) -> Result<&Particle, SisError> {
        let mut best: Option<&Particle> = None;
        for p in &self.particles {
            if p.trace.is_some() && p.log_weight > best.map_or(f64::NEG_INFINITY, |b| b.log_weight) {
                best = Some(p);
            }
        }
        best.ok_or(SisError::Degenerate)
    }

    pub fn fallback_count(&self) -> usize {
        self.particles.iter().map(|p| p.fallbacks).sum()
    }

    pub fn failure_count(&self) -> usize {
        self.particles.iter().filter(|p| p.error.is_some()).count()
    }

    /// One row per particle: `particle,log_weight,<zeta columns>`. Failed
    /// particles leave the zeta columns empty.
    pub fn write_particles_csv<W: Write>(
        &self,
        out: W,
        names: &[String],
        zeta: impl Fn(&Trace) -> Vec<f64>,
    ) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["particle".to_string(), "log_weight".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for (k, p) in self.particles.iter().enumerate() {
            let mut row = vec![k.to_string(), p.log_weight.to_string()];
            match &p.trace {
                Some(t) => row.extend(zeta(t).iter().map(|v| v.to_string())),
                None => row.extend(names.iter().map(|_| String::new())),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `statistic,value` rows: particle count, ESS, log evidence, fallback
    /// and failure counts, then `mean_<name>` for each expectation.
    pub fn write_summary_csv<W: Write>(
        &self,
        out: W,
        names: &[String],
        zeta: impl Fn(&Trace) -> Vec<f64>,
    ) -> Result<(), SummaryError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["statistic", "value"])?;
        let ess = self.effective_sample_size().map_or(f64::NAN, |e| e);
        let stats = [
            ("particles", self.len() as f64),
            ("ess", ess),
            ("log_evidence", self.log_evidence()),
            ("fallbacks", self.fallback_count() as f64),
            ("failures", self.failure_count() as f64),
        ];
        for (k, v) in stats {
            w.write_record([k.to_string(), v.to_string()])?;
        }
        let means = self.estimate_expectation(zeta)?;
        for (name, v) in names.iter().zip(means) {
            w.write_record([format!("mean_{name}"), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SummaryError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sis(#[from] SisError),
}
