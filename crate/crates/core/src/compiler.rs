//! Trains a proposal artifact on traces from the unconstrained model.
//!
//! Minibatches come from a [`TraceSource`], a one-way stream: each batch is
//! used for one Adam step and then dropped. Only the validation set, drawn
//! once from its own seed, is kept for the whole run.

use std::io::Write;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{Adam, AdamConfig, ArchConfig, Gradients, NeuralError, NodeId, ProposalArtifact, Tape};
use crate::runtime::{execute, Mode, ModelProgram, RuntimeError};
use crate::trace::{Observations, TraceEntry};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CompileConfig {
    pub arch: ArchConfig,
    pub optimizer: AdamConfig,
    pub minibatch_size: usize,
    /// Total number of training traces.
    pub budget: u64,
    pub validation_size: usize,
    /// Minibatches between validation evaluations.
    pub validation_interval: usize,
    pub seed: u64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    /// Reconnection attempts after a retriable trace-source failure.
    pub max_reconnects: usize,
}

impl Default for CompileConfig {
    fn default() -> Self {
        CompileConfig {
            arch: ArchConfig::default(),
            optimizer: AdamConfig::default(),
            minibatch_size: 128,
            budget: 50_000,
            validation_size: 256,
            validation_interval: 10,
            seed: 0,
            clip_norm: 5.0,
            max_reconnects: 3,
        }
    }
}

impl CompileConfig {
    pub fn validate(&self) -> Result<(), CompileError> {
        if self.minibatch_size == 0 || self.validation_size == 0 || self.validation_interval == 0 {
            return Err(CompileError::Config(
                "minibatch_size, validation_size and validation_interval must be positive".into(),
            ));
        }
        if self.budget > 0 && self.budget < self.minibatch_size as u64 {
            return Err(CompileError::Config(format!(
                "budget {} is smaller than one minibatch ({})",
                self.budget, self.minibatch_size
            )));
        }
        self.arch.validate()?;
        Ok(())
    }
}

/// Independent seeds for the parts of a run that draw random numbers.
pub mod seeds {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const VALIDATION: u64 = 3;

    /// SplitMix64 of `seed` combined with `purpose`.
    pub fn derive(seed: u64, purpose: u64) -> u64 {
        let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// One unconstrained execution: its sample entries and the observations it
/// generated.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTrace {
    pub entries: Vec<TraceEntry>,
    pub observations: Observations,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingBatch {
    pub traces: Vec<TrainingTrace>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    /// The source may work again after [`TraceSource::reconnect`].
    #[error("trace source interrupted: {0}")]
    Retriable(String),
    #[error("trace source failed: {0}")]
    Fatal(String),
}

/// A one-way stream of training minibatches.
pub trait TraceSource {
    fn next_batch(&mut self, size: usize) -> Result<TrainingBatch, SourceError>;

    /// Re-establishes the stream after a retriable failure. Implementations
    /// start a fresh seed epoch.
    fn reconnect(&mut self) -> Result<(), SourceError>;
}

/// Runs a model in unconstrained mode from a seeded generator. Shared by the
/// in-process source and the trace server so both produce identical traces.
pub struct TraceGenerator<'m> {
    model: &'m dyn ModelProgram,
    rng: ChaCha8Rng,
}

impl<'m> TraceGenerator<'m> {
    pub fn new(model: &'m dyn ModelProgram, seed: u64) -> Self {
        TraceGenerator { model, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn generate(&mut self, size: usize) -> Result<TrainingBatch, RuntimeError> {
        let mut traces = Vec::with_capacity(size);
        for _ in 0..size {
            let ex = execute(self.model, Mode::Unconstrained, None, None, &mut self.rng)?;
            traces.push(TrainingTrace {
                entries: ex.trace.entries,
                observations: ex.synthetic_observations.unwrap_or_default(),
            });
        }
        Ok(TrainingBatch { traces })
    }
}

/// Generates traces in the training process.
pub struct InProcessSource<'m> {
    generator: TraceGenerator<'m>,
}

impl<'m> InProcessSource<'m> {
    pub fn new(model: &'m dyn ModelProgram, seed: u64) -> Self {
        InProcessSource { generator: TraceGenerator::new(model, seed) }
    }
}

impl TraceSource for InProcessSource<'_> {
    fn next_batch(&mut self, size: usize) -> Result<TrainingBatch, SourceError> {
        self.generator.generate(size).map_err(|e| SourceError::Fatal(e.to_string()))
    }

    fn reconnect(&mut self) -> Result<(), SourceError> {
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("invalid compile configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("batch comes from model {got}, artifact is for {expected}")]
    ModelMismatch { expected: String, got: String },
}

/// `-(1/M) sum_m log q(x^m | y^m)` for a registered batch, recorded on `tape`.
pub fn batch_loss(
    artifact: &ProposalArtifact,
    model: &dyn ModelProgram,
    tape: &mut Tape<'_>,
    batch: &TrainingBatch,
) -> Result<NodeId, NeuralError> {
    let mut terms = Vec::with_capacity(batch.len());
    for t in &batch.traces {
        let features = model.observation_features(&t.observations);
        terms.push(artifact.trace_log_q(tape, &features, &t.entries)?);
    }
    let total = tape.sum_scalars(&terms);
    Ok(tape.scale(total, -1.0 / batch.len().max(1) as f64))
}

/// Loss on a fixed set without touching parameters.
pub fn validation_loss(
    artifact: &ProposalArtifact,
    model: &dyn ModelProgram,
    set: &TrainingBatch,
) -> Result<f64, CompileError> {
    if set.is_empty() {
        return Err(CompileError::EmptyValidationSet);
    }
    let mut tape = Tape::new(&artifact.params);
    let loss = batch_loss(artifact, model, &mut tape, set)?;
    Ok(tape.scalar(loss))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub traces_seen: u64,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["traces_seen", "train_loss", "valid_loss"])?;
        for r in &self.rows {
            w.write_record([r.traces_seen.to_string(), r.train_loss.to_string(), r.valid_loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws the validation set from its dedicated seed.
pub fn validation_set(model: &dyn ModelProgram, config: &CompileConfig) -> Result<TrainingBatch, RuntimeError> {
    TraceGenerator::new(model, seeds::derive(config.seed, seeds::VALIDATION)).generate(config.validation_size)
}

/// Trains a fresh artifact for `model` on `config.budget` traces from
/// `source`.
pub fn compile(
    model: &dyn ModelProgram,
    config: &CompileConfig,
    source: &mut dyn TraceSource,
) -> Result<(ProposalArtifact, TrainingLog), CompileError> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, seeds::INIT));
    let mut artifact = ProposalArtifact::new(model.id(), model.feature_dim(), config.arch.clone(), &mut init_rng)?;

    let valid = validation_set(model, config)?;
    for t in &valid.traces {
        artifact.register_entries(&t.entries, &mut init_rng)?;
    }
    let initial = validation_loss(&artifact, model, &valid)?;
    info!(
        "compiling {} with {} parameters; initial validation loss {initial:.6}",
        model.id(),
        artifact.params.scalar_count()
    );

    let mut adam = Adam::new(config.optimizer);
    let mut log = TrainingLog::default();
    let mut seen = 0u64;
    let mut steps = 0usize;
    let mut last_valid = initial;
    let mut reconnects = 0usize;

    while seen < config.budget {
        let size = (config.budget - seen).min(config.minibatch_size as u64) as usize;
        let batch = match source.next_batch(size) {
            Ok(b) => b,
            Err(SourceError::Retriable(msg)) if reconnects < config.max_reconnects => {
                reconnects += 1;
                warn!("trace source interrupted ({msg}); reconnecting (attempt {reconnects})");
                source.reconnect()?;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        if batch.len() != size {
            return Err(SourceError::Fatal(format!("requested {size} traces, received {}", batch.len())).into());
        }
        for t in &batch.traces {
            artifact.register_entries(&t.entries, &mut init_rng)?;
        }

        let mut grads = Gradients::new();
        let train_loss = {
            let mut tape = Tape::new(&artifact.params);
            let loss = batch_loss(&artifact, model, &mut tape, &batch)?;
            tape.backward(loss, &mut grads).map_err(NeuralError::from)?;
            tape.scalar(loss)
        };
        let norm = if config.clip_norm > 0.0 { grads.clip_global_norm(config.clip_norm) } else { grads.global_norm() };
        if norm.is_finite() {
            adam.step(&mut artifact.params, &grads);
        } else {
            warn!("skipping update with non-finite gradient norm after {seen} traces");
        }
        seen += size as u64;
        steps += 1;

        if steps.is_multiple_of(config.validation_interval) || seen >= config.budget {
            last_valid = validation_loss(&artifact, model, &valid)?;
            log.rows.push(LogRow { traces_seen: seen, train_loss, valid_loss: last_valid });
            debug!("traces {seen}: train {train_loss:.6} valid {last_valid:.6}");
        }
    }

    artifact.metadata.traces_seen = seen;
    artifact.metadata.initial_validation_loss = initial;
    artifact.metadata.final_validation_loss = last_valid;
    info!("finished after {seen} traces; validation loss {initial:.6} -> {last_valid:.6}");
    Ok((artifact, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{ProposalType, SampleValue};
    use crate::models::ConjugateGaussian;
    use crate::trace::Address;

    fn small_config() -> CompileConfig {
        CompileConfig {
            arch: ArchConfig {
                hidden_size: 8,
                sample_embed_dim: 2,
                obs_embed_dim: 4,
                max_addresses: 4,
                max_instances: 4,
                ..Default::default()
            },
            minibatch_size: 8,
            budget: 64,
            validation_size: 16,
            validation_interval: 2,
            seed: 11,
            ..Default::default()
        }
    }

    fn single_entry_batch(x: f64, copies: usize) -> TrainingBatch {
        let entry = TraceEntry {
            value: SampleValue::Real(x),
            address: Address::new("mu").unwrap(),
            instance: 1,
            proposal_type: ProposalType::Normal,
            prior_log_pdf: 0.0,
            proposal_log_pdf: None,
        };
        let t = TrainingTrace { entries: vec![entry], observations: Observations::new(vec![SampleValue::Real(0.3)]) };
        TrainingBatch { traces: vec![t; copies] }
    }

    #[test]
    fn duplicated_trace_gives_same_loss() {
        let model = ConjugateGaussian::new(0.0, 1.0, 1.0, 1);
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut art = ProposalArtifact::new(model.id(), 1, cfg.arch.clone(), &mut rng).unwrap();
        let one = single_entry_batch(0.4, 1);
        art.register_entries(&one.traces[0].entries, &mut rng).unwrap();
        let a = validation_loss(&art, &model, &one).unwrap();
        let b = validation_loss(&art, &model, &single_entry_batch(0.4, 2)).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert_eq!(a, validation_loss(&art, &model, &one).unwrap());
    }

    #[test]
    fn empty_validation_set_rejected() {
        let model = ConjugateGaussian::default();
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let art = ProposalArtifact::new(model.id(), 3, cfg.arch, &mut rng).unwrap();
        assert!(matches!(
            validation_loss(&art, &model, &TrainingBatch::default()),
            Err(CompileError::EmptyValidationSet)
        ));
    }

    #[test]
    fn zero_budget_registers_from_validation_only() {
        let model = ConjugateGaussian::default();
        let cfg = CompileConfig { budget: 0, ..small_config() };
        let mut source = InProcessSource::new(&model, 1);
        let (art, log) = compile(&model, &cfg, &mut source).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(art.registry.layers().len(), 1);
        assert_eq!(art.metadata.traces_seen, 0);
        assert_eq!(art.metadata.initial_validation_loss, art.metadata.final_validation_loss);
    }

    #[test]
    fn compile_is_deterministic_and_logs() {
        let model = ConjugateGaussian::default();
        let cfg = small_config();
        let run = || {
            let mut source = InProcessSource::new(&model, seeds::derive(cfg.seed, seeds::TRAIN));
            compile(&model, &cfg, &mut source).unwrap()
        };
        let (a, log_a) = run();
        let (b, log_b) = run();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.rows.len(), 4);
        assert_eq!(log_a.rows.last().unwrap().traces_seen, 64);
        let mut buf = Vec::new();
        log_a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("traces_seen,train_loss,valid_loss\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn budget_below_minibatch_rejected() {
        let cfg = CompileConfig { budget: 3, ..small_config() };
        assert!(matches!(cfg.validate(), Err(CompileError::Config(_))));
    }

    struct Flaky<'m> {
        inner: InProcessSource<'m>,
        fail_next: bool,
        reconnects: usize,
    }

    impl TraceSource for Flaky<'_> {
        fn next_batch(&mut self, size: usize) -> Result<TrainingBatch, SourceError> {
            if std::mem::take(&mut self.fail_next) {
                return Err(SourceError::Retriable("connection reset".into()));
            }
            self.inner.next_batch(size)
        }

        fn reconnect(&mut self) -> Result<(), SourceError> {
            self.reconnects += 1;
            Ok(())
        }
    }

    #[test]
    fn retriable_source_error_reconnects() {
        let model = ConjugateGaussian::default();
        let cfg = small_config();
        let mut src = Flaky { inner: InProcessSource::new(&model, 5), fail_next: true, reconnects: 0 };
        let (art, _) = compile(&model, &cfg, &mut src).unwrap();
        assert_eq!(src.reconnects, 1);
        assert_eq!(art.metadata.traces_seen, 64);
    }
}
