//! The compiled proposal artifact: every trained parameter plus the
//! architecture needed to rebuild the network, and its binary file format.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! "ICART"  format-version:u32  model-id:str
//! hyperparameters  training-metadata
//! address vocabulary  layer layout  registry
//! parameters: count:u32, then per tensor name:str ndim:u32 dims:u32.. values:f64..
//! crc32:u32 over every preceding byte
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::layers::{Affine, LstmCell, LstmSession, LstmStack};
use super::params::{ParamId, ParamStore, Tensor};
use super::registry::{LayerRegistry, RegisteredLayers};
use super::tape::{NodeId, Tape};
use super::NeuralError;
use crate::distributions::{ProposalType, SampleValue};
use crate::runtime::{OracleError, ProposalOracle, ProposalRequest};
use crate::trace::{Address, TraceEntry};

pub const ARTIFACT_MAGIC: &[u8; 5] = b"ICART";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub lstm_layers: usize,
    pub hidden_size: usize,
    pub sample_embed_dim: usize,
    pub obs_embed_dim: usize,
    /// Width of an optional hidden layer in the observation embedding; 0 for none.
    pub obs_hidden_dim: usize,
    pub max_addresses: usize,
    pub max_instances: usize,
    /// Feed the observation embedding at every step rather than only the first.
    pub obs_every_step: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            lstm_layers: 1,
            hidden_size: 128,
            sample_embed_dim: 8,
            obs_embed_dim: 64,
            obs_hidden_dim: 0,
            max_addresses: 32,
            max_instances: 64,
            obs_every_step: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let positive = [
            ("lstm_layers", self.lstm_layers),
            ("hidden_size", self.hidden_size),
            ("sample_embed_dim", self.sample_embed_dim),
            ("obs_embed_dim", self.obs_embed_dim),
            ("max_addresses", self.max_addresses),
            ("max_instances", self.max_instances),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NeuralError::Architecture(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Width of the LSTM input.
    pub fn rho_dim(&self) -> usize {
        self.obs_embed_dim + self.sample_embed_dim + self.max_addresses + self.max_instances + ProposalType::COUNT
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingMetadata {
    pub traces_seen: u64,
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalArtifact {
    pub model_id: String,
    pub arch: ArchConfig,
    pub feature_dim: usize,
    pub params: ParamStore,
    /// Dense layers of the observation embedding, each followed by tanh.
    pub obs_embedding: Vec<Affine>,
    pub lstm: LstmStack,
    pub registry: LayerRegistry,
    pub metadata: TrainingMetadata,
}

impl ProposalArtifact {
    /// Fresh network with the observation embedding and LSTM core; no
    /// address-specific layers yet.
    pub fn new<R: Rng + ?Sized>(
        model_id: impl Into<String>,
        feature_dim: usize,
        arch: ArchConfig,
        rng: &mut R,
    ) -> Result<Self, NeuralError> {
        arch.validate()?;
        if feature_dim == 0 {
            return Err(NeuralError::Architecture("observation feature dimension must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut obs_embedding = Vec::new();
        if arch.obs_hidden_dim > 0 {
            obs_embedding.push(Affine::init(&mut params, "obs.0", feature_dim, arch.obs_hidden_dim, rng));
            obs_embedding.push(Affine::init(&mut params, "obs.1", arch.obs_hidden_dim, arch.obs_embed_dim, rng));
        } else {
            obs_embedding.push(Affine::init(&mut params, "obs.0", feature_dim, arch.obs_embed_dim, rng));
        }
        let lstm = LstmStack::init(&mut params, arch.rho_dim(), arch.hidden_size, arch.lstm_layers, rng);
        let registry = LayerRegistry::new(arch.max_addresses, arch.max_instances);
        Ok(ProposalArtifact {
            model_id: model_id.into(),
            arch,
            feature_dim,
            params,
            obs_embedding,
            lstm,
            registry,
            metadata: TrainingMetadata::default(),
        })
    }

    /// Registers layers for every (address, instance) in `entries`.
    pub fn register_entries<R: Rng + ?Sized>(
        &mut self,
        entries: &[TraceEntry],
        rng: &mut R,
    ) -> Result<(), NeuralError> {
        for e in entries {
            self.registry.get_or_create(
                &mut self.params,
                rng,
                &e.address,
                e.instance,
                e.proposal_type,
                self.arch.hidden_size,
                self.arch.sample_embed_dim,
            )?;
        }
        Ok(())
    }

    pub fn embed_observations(&self, tape: &mut Tape<'_>, features: &[f64]) -> Result<NodeId, NeuralError> {
        if features.len() != self.feature_dim {
            return Err(NeuralError::Dimension {
                what: "observation features",
                expected: self.feature_dim,
                got: features.len(),
            });
        }
        let mut x = tape.constant(features.to_vec());
        for layer in &self.obs_embedding {
            let y = layer.forward(tape, x);
            x = tape.tanh(y);
        }
        Ok(x)
    }

    /// Forward-only observation embedding.
    pub fn observation_embedding(&self, features: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let mut tape = Tape::new(&self.params);
        let e = self.embed_observations(&mut tape, features)?;
        Ok(tape.value(e).to_vec())
    }

    pub fn embed_sample(
        &self,
        tape: &mut Tape<'_>,
        layers: &RegisteredLayers,
        value: &SampleValue,
    ) -> Result<NodeId, NeuralError> {
        let mut features = Vec::with_capacity(layers.proposal_type.value_feature_dim());
        layers.proposal_type.value_features(value, &mut features)?;
        let x = tape.constant(features);
        let y = layers.sample_embedding.forward(tape, x);
        Ok(tape.tanh(y))
    }

    /// One-hot encodings of address, instance, and proposal type.
    pub fn one_hots(&self, address_index: usize, instance: u32, ptype: &ProposalType) -> Vec<f64> {
        let (a_max, i_max) = (self.arch.max_addresses, self.arch.max_instances);
        let mut v = vec![0.0; a_max + i_max + ProposalType::COUNT];
        v[address_index] = 1.0;
        v[a_max + instance as usize - 1] = 1.0;
        v[a_max + i_max + ptype.type_index()] = 1.0;
        v
    }

    /// LSTM input for one step: observation embedding, previous sample
    /// embedding (zeros when absent), and the one-hot block.
    pub fn build_rho(
        &self,
        tape: &mut Tape<'_>,
        obs_embed: NodeId,
        prev_embed: Option<NodeId>,
        address: &Address,
        instance: u32,
        ptype: &ProposalType,
    ) -> Result<NodeId, NeuralError> {
        let address_index =
            self.registry.address_index(address).ok_or_else(|| NeuralError::UnseenKey(address.clone(), instance))?;
        if instance == 0 || instance as usize > self.arch.max_instances {
            return Err(NeuralError::UnseenKey(address.clone(), instance));
        }
        let prev = match prev_embed {
            Some(p) => p,
            None => tape.zeros(self.arch.sample_embed_dim),
        };
        let hot = tape.constant(self.one_hots(address_index, instance, ptype));
        Ok(tape.concat(&[obs_embed, prev, hot]))
    }

    /// `sum_t log q(x_t | eta_t)` for one trace, with the trace's own values
    /// fed back as previous samples.
    pub fn trace_log_q(
        &self,
        tape: &mut Tape<'_>,
        features: &[f64],
        entries: &[TraceEntry],
    ) -> Result<NodeId, NeuralError> {
        let obs = self.embed_observations(tape, features)?;
        let obs_later = if self.arch.obs_every_step { obs } else { tape.zeros(self.arch.obs_embed_dim) };
        let mut state = self.lstm.zero_state(tape);
        let mut prev: Option<NodeId> = None;
        let mut terms = Vec::with_capacity(entries.len());
        for (t, e) in entries.iter().enumerate() {
            let layers = self.registry.get(&e.address, e.instance)?;
            if layers.proposal_type != e.proposal_type {
                return Err(NeuralError::ProposalTypeMismatch {
                    address: e.address.clone(),
                    registered: layers.proposal_type,
                    requested: e.proposal_type,
                });
            }
            let obs_t = if t == 0 { obs } else { obs_later };
            let rho = self.build_rho(tape, obs_t, prev, &e.address, e.instance, &e.proposal_type)?;
            state = self.lstm.step(tape, &state, rho);
            let h = state.last().expect("at least one LSTM layer").0;
            let eta = layers.proposal.forward(tape, h);
            terms.push(tape.log_proposal(eta, &e.proposal_type, &e.value)?);
            prev = Some(self.embed_sample(tape, layers, &e.value)?);
        }
        Ok(if terms.is_empty() { tape.constant(vec![0.0]) } else { tape.sum_scalars(&terms) })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(ARTIFACT_MAGIC);
        w.u32(ARTIFACT_VERSION);
        w.str(&self.model_id);

        let a = &self.arch;
        for v in [
            a.lstm_layers,
            a.hidden_size,
            a.sample_embed_dim,
            a.obs_embed_dim,
            a.obs_hidden_dim,
            a.max_addresses,
            a.max_instances,
            ProposalType::COUNT,
            self.feature_dim,
        ] {
            w.u32(v as u32);
        }
        w.u8(a.obs_every_step as u8);

        w.u64(self.metadata.traces_seen);
        w.f64(self.metadata.initial_validation_loss);
        w.f64(self.metadata.final_validation_loss);

        w.u32(self.registry.addresses().len() as u32);
        for addr in self.registry.addresses() {
            w.str(addr.as_str());
        }

        w.u32(self.obs_embedding.len() as u32);
        for l in &self.obs_embedding {
            w.affine(l);
        }
        w.u32(self.lstm.cells.len() as u32);
        for c in &self.lstm.cells {
            w.u32(c.weight.index() as u32);
            w.u32(c.bias.index() as u32);
            w.u32(c.input_dim as u32);
            w.u32(c.hidden as u32);
        }
        w.u32(self.registry.len() as u32);
        for l in self.registry.layers() {
            w.u32(self.registry.address_index(&l.address).expect("registered address") as u32);
            w.u32(l.instance);
            w.proposal_type(&l.proposal_type);
            w.affine(&l.sample_embedding);
            w.affine(&l.proposal);
        }

        w.u32(self.params.len() as u32);
        for (_, p) in self.params.iter() {
            w.str(&p.name);
            w.u32(p.tensor.shape.len() as u32);
            for d in &p.tensor.shape {
                w.u32(*d as u32);
            }
            for x in &p.tensor.data {
                w.f64(*x);
            }
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        w.buf
    }

    /// Parses an artifact. With `expected_model` set, a different model id
    /// is an error.
    pub fn from_bytes(bytes: &[u8], expected_model: Option<&str>) -> Result<Self, ArtifactError> {
        if bytes.len() < ARTIFACT_MAGIC.len() || &bytes[..ARTIFACT_MAGIC.len()] != ARTIFACT_MAGIC {
            return Err(ArtifactError::BadMagic);
        }
        if bytes.len() < ARTIFACT_MAGIC.len() + 8 {
            return Err(ArtifactError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let mut r = Reader { buf: body, pos: ARTIFACT_MAGIC.len() };
        let version = r.u32()?;
        if version != ARTIFACT_VERSION {
            return Err(ArtifactError::Version { found: version, expected: ARTIFACT_VERSION });
        }
        if crc32fast::hash(body) != stored {
            return Err(ArtifactError::Checksum);
        }
        let model_id = r.str()?;
        if let Some(expected) = expected_model {
            if expected != model_id {
                return Err(ArtifactError::ModelMismatch { expected: expected.to_string(), found: model_id });
            }
        }

        let mut dims = [0usize; 9];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let [lstm_layers, hidden_size, sample_embed_dim, obs_embed_dim, obs_hidden_dim, max_addresses, max_instances, ptypes, feature_dim] =
            dims;
        if ptypes != ProposalType::COUNT {
            return Err(ArtifactError::Malformed(format!("artifact uses {ptypes} proposal types")));
        }
        let obs_every_step = r.u8()? != 0;
        let arch = ArchConfig {
            lstm_layers,
            hidden_size,
            sample_embed_dim,
            obs_embed_dim,
            obs_hidden_dim,
            max_addresses,
            max_instances,
            obs_every_step,
        };
        let metadata = TrainingMetadata {
            traces_seen: r.u64()?,
            initial_validation_loss: r.f64()?,
            final_validation_loss: r.f64()?,
        };

        let n_addr = r.u32()? as usize;
        let mut addresses = Vec::with_capacity(n_addr.min(1024));
        for _ in 0..n_addr {
            addresses.push(Address::new(r.str()?).map_err(|e| ArtifactError::Malformed(e.to_string()))?);
        }

        let n_obs = r.u32()? as usize;
        let obs_embedding = (0..n_obs).map(|_| r.affine()).collect::<Result<Vec<_>, _>>()?;
        let n_cells = r.u32()? as usize;
        let mut cells = Vec::with_capacity(n_cells.min(64));
        for _ in 0..n_cells {
            cells.push(LstmCell {
                weight: ParamId(r.u32()? as usize),
                bias: ParamId(r.u32()? as usize),
                input_dim: r.u32()? as usize,
                hidden: r.u32()? as usize,
            });
        }
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(4096));
        for _ in 0..n_layers {
            let ai = r.u32()? as usize;
            let address = addresses
                .get(ai)
                .cloned()
                .ok_or_else(|| ArtifactError::Malformed(format!("address index {ai} out of range")))?;
            layers.push(RegisteredLayers {
                address,
                instance: r.u32()?,
                proposal_type: r.proposal_type()?,
                sample_embedding: r.affine()?,
                proposal: r.affine()?,
            });
        }

        let n_params = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            if n > (r.buf.len() - r.pos) / 8 {
                return Err(ArtifactError::Truncated);
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            params.add(name, Tensor::new(shape, data));
        }
        if r.pos != r.buf.len() {
            return Err(ArtifactError::Malformed(format!("{} trailing bytes", r.buf.len() - r.pos)));
        }

        let artifact = ProposalArtifact {
            model_id,
            arch,
            feature_dim,
            params,
            obs_embedding,
            lstm: LstmStack { cells },
            registry: LayerRegistry::restore(max_addresses, max_instances, addresses, layers),
            metadata,
        };
        artifact.check_layout()?;
        Ok(artifact)
    }

    fn check_layout(&self) -> Result<(), ArtifactError> {
        let n = self.params.len();
        let check = |id: ParamId, shape: &[usize]| -> Result<(), ArtifactError> {
            if id.index() >= n || self.params.tensor(id).shape != shape {
                return Err(ArtifactError::Malformed(format!("parameter {} does not match layout", id.index())));
            }
            Ok(())
        };
        let affine = |l: &Affine| -> Result<(), ArtifactError> {
            check(l.weight, &[l.output_dim, l.input_dim])?;
            check(l.bias, &[l.output_dim])
        };
        for l in &self.obs_embedding {
            affine(l)?;
        }
        if self.lstm.cells.is_empty() {
            return Err(ArtifactError::Malformed("no LSTM layers".into()));
        }
        for c in &self.lstm.cells {
            check(c.weight, &[4 * c.hidden, c.input_dim + c.hidden])?;
            check(c.bias, &[4 * c.hidden])?;
        }
        for l in self.registry.layers() {
            affine(&l.sample_embedding)?;
            affine(&l.proposal)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArtifactError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ArtifactError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>, expected_model: Option<&str>) -> Result<Self, ArtifactError> {
        let bytes = std::fs::read(path).map_err(|e| ArtifactError::Io(e.to_string()))?;
        Self::from_bytes(&bytes, expected_model)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArtifactError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("not an artifact file (bad magic bytes)")]
    BadMagic,
    #[error("artifact format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("artifact checksum mismatch")]
    Checksum,
    #[error("artifact file is truncated")]
    Truncated,
    #[error("artifact was compiled for model {found}, expected {expected}")]
    ModelMismatch { expected: String, found: String },
    #[error("malformed artifact: {0}")]
    Malformed(String),
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn affine(&mut self, l: &Affine) {
        self.u32(l.weight.index() as u32);
        self.u32(l.bias.index() as u32);
        self.u32(l.input_dim as u32);
        self.u32(l.output_dim as u32);
    }
    fn proposal_type(&mut self, t: &ProposalType) {
        match *t {
            ProposalType::Normal => self.u8(0),
            ProposalType::UniformContinuous { low, high } => {
                self.u8(1);
                self.f64(low);
                self.f64(high);
            }
            ProposalType::Categorical { categories } => {
                self.u8(2);
                self.u32(categories);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ArtifactError> {
        if self.buf.len() - self.pos < n {
            return Err(ArtifactError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ArtifactError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ArtifactError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ArtifactError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ArtifactError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, ArtifactError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| ArtifactError::Malformed(e.to_string()))
    }
    fn affine(&mut self) -> Result<Affine, ArtifactError> {
        Ok(Affine {
            weight: ParamId(self.u32()? as usize),
            bias: ParamId(self.u32()? as usize),
            input_dim: self.u32()? as usize,
            output_dim: self.u32()? as usize,
        })
    }
    fn proposal_type(&mut self) -> Result<ProposalType, ArtifactError> {
        match self.u8()? {
            0 => Ok(ProposalType::Normal),
            1 => Ok(ProposalType::UniformContinuous { low: self.f64()?, high: self.f64()? }),
            2 => Ok(ProposalType::Categorical { categories: self.u32()? }),
            t => Err(ArtifactError::Malformed(format!("unknown proposal type tag {t}"))),
        }
    }
}

/// Per-execution proposal session over a trained artifact.
///
/// Holds its own LSTM state; create one per particle. Requests for
/// (address, instance) pairs the artifact never registered return
/// [`OracleError::UnseenKey`], and the next step sees a zero previous-sample
/// embedding.
pub struct ArtifactOracle<'a> {
    artifact: &'a ProposalArtifact,
    obs_embedding: &'a [f64],
    session: LstmSession,
    previous: Option<&'a RegisteredLayers>,
    steps: usize,
}

impl<'a> ArtifactOracle<'a> {
    /// `obs_embedding` is [`ProposalArtifact::observation_embedding`] of the
    /// observed data, computed once and shared across particles.
    pub fn new(artifact: &'a ProposalArtifact, obs_embedding: &'a [f64]) -> Self {
        ArtifactOracle { artifact, obs_embedding, session: LstmSession::new(&artifact.lstm), previous: None, steps: 0 }
    }

    fn step(&mut self, layers: &'a RegisteredLayers, req: &ProposalRequest<'_>) -> Result<Vec<f64>, NeuralError> {
        let art = self.artifact;
        let mut tape = Tape::new(&art.params);
        let obs = if self.steps == 0 || art.arch.obs_every_step {
            tape.constant(self.obs_embedding.to_vec())
        } else {
            tape.zeros(art.arch.obs_embed_dim)
        };
        let prev = match (self.previous, req.previous_value) {
            (Some(l), Some(v)) => Some(art.embed_sample(&mut tape, l, v)?),
            _ => None,
        };
        let rho = art.build_rho(&mut tape, obs, prev, req.address, req.instance, req.proposal_type)?;
        let state = self.session.load(&mut tape);
        let next = art.lstm.step(&mut tape, &state, rho);
        self.session.store(&tape, &next);
        let h = next.last().expect("at least one LSTM layer").0;
        let eta = layers.proposal.forward(&mut tape, h);
        Ok(tape.value(eta).to_vec())
    }
}

impl ProposalOracle for ArtifactOracle<'_> {
    fn propose(&mut self, req: &ProposalRequest<'_>) -> Result<Vec<f64>, OracleError> {
        let layers = match self.artifact.registry.get(req.address, req.instance) {
            Ok(l) if l.proposal_type == *req.proposal_type => l,
            _ => {
                self.previous = None;
                return Err(OracleError::UnseenKey(req.address.clone(), req.instance));
            }
        };
        match self.step(layers, req) {
            Ok(eta) => {
                self.previous = Some(layers);
                self.steps += 1;
                Ok(eta)
            }
            Err(e) => {
                self.previous = None;
                Err(OracleError::Unavailable(e.to_string()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::Gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            lstm_layers: 2,
            hidden_size: 6,
            sample_embed_dim: 3,
            obs_embed_dim: 4,
            obs_hidden_dim: 5,
            max_addresses: 8,
            max_instances: 4,
            obs_every_step: true,
        }
    }

    fn entry(a: &str, i: u32, v: SampleValue, t: ProposalType) -> TraceEntry {
        TraceEntry {
            value: v,
            address: Address::new(a).unwrap(),
            instance: i,
            proposal_type: t,
            prior_log_pdf: 0.0,
            proposal_log_pdf: None,
        }
    }

    fn sample_entries() -> Vec<TraceEntry> {
        vec![
            entry("k", 1, SampleValue::Category(1), ProposalType::Categorical { categories: 3 }),
            entry("mu", 1, SampleValue::Real(0.2), ProposalType::UniformContinuous { low: -1.0, high: 1.0 }),
            entry("mu", 2, SampleValue::Real(-0.4), ProposalType::UniformContinuous { low: -1.0, high: 1.0 }),
            entry("s", 1, SampleValue::Real(1.3), ProposalType::Normal),
        ]
    }

    fn trained_like() -> ProposalArtifact {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut art = ProposalArtifact::new("test-model", 3, tiny_arch(), &mut rng).unwrap();
        art.register_entries(&sample_entries(), &mut rng).unwrap();
        art.metadata = TrainingMetadata { traces_seen: 42, initial_validation_loss: 3.5, final_validation_loss: 1.25 };
        art
    }

    #[test]
    fn rho_dimension_and_layout() {
        let art = trained_like();
        assert_eq!(art.arch.rho_dim(), 4 + 3 + 8 + 4 + 3);
        let mut tape = Tape::new(&art.params);
        let obs = art.embed_observations(&mut tape, &[0.1, 0.2, 0.3]).unwrap();
        let a = Address::new("k").unwrap();
        let rho = art.build_rho(&mut tape, obs, None, &a, 1, &ProposalType::Categorical { categories: 3 }).unwrap();
        let v = tape.value(rho).to_vec();
        assert_eq!(v.len(), art.arch.rho_dim());
        // Previous-sample slot is zero at the first step.
        assert_eq!(&v[4..7], &[0.0; 3]);
        // First registered address in an 8-wide vocabulary.
        assert_eq!(&v[7..15], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&v[15..19], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(&v[19..22], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn unregistered_key_is_rejected_by_forward_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let art = ProposalArtifact::new("m", 3, tiny_arch(), &mut rng).unwrap();
        let mut tape = Tape::new(&art.params);
        assert!(matches!(art.trace_log_q(&mut tape, &[0.0; 3], &sample_entries()), Err(NeuralError::UnseenKey(_, 1))));
    }

    #[test]
    fn observation_feature_width_checked() {
        let art = trained_like();
        assert!(matches!(
            art.observation_embedding(&[0.0; 2]),
            Err(NeuralError::Dimension { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let art = trained_like();
        let bytes = art.to_bytes();
        let back = ProposalArtifact::from_bytes(&bytes, Some("test-model")).unwrap();
        assert_eq!(back, art);
        for ((_, a), (_, b)) in art.params.iter().zip(back.params.iter()) {
            let ab: Vec<u64> = a.tensor.data.iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u64> = b.tensor.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.registry.addresses(), art.registry.addresses());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_files_rejected() {
        let bytes = trained_like().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(ProposalArtifact::from_bytes(&bad, None), Err(ArtifactError::BadMagic));

        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x10;
        assert_eq!(ProposalArtifact::from_bytes(&bad, None), Err(ArtifactError::Checksum));

        assert!(ProposalArtifact::from_bytes(&bytes[..bytes.len() - 9], None).is_err());
        assert!(ProposalArtifact::from_bytes(&bytes[..7], None).is_err());

        let mut bad = bytes.clone();
        bad[5..9].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(ProposalArtifact::from_bytes(&bad, None), Err(ArtifactError::Version { found: 2, .. })));
    }

    #[test]
    fn strict_model_check() {
        let bytes = trained_like().to_bytes();
        assert!(matches!(
            ProposalArtifact::from_bytes(&bytes, Some("other")),
            Err(ArtifactError::ModelMismatch { .. })
        ));
        assert!(ProposalArtifact::from_bytes(&bytes, None).is_ok());
    }

    #[test]
    fn file_round_trip() {
        let art = trained_like();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.icart");
        art.save(&path).unwrap();
        assert_eq!(ProposalArtifact::load(&path, Some("test-model")).unwrap(), art);
    }

    /// The oracle, fed the trace's own values, must reproduce the eta the
    /// teacher-forced training pass computes.
    #[test]
    fn oracle_matches_teacher_forced_pass() {
        let art = trained_like();
        let features = [0.3, -0.2, 0.9];
        let entries = sample_entries();
        let emb = art.observation_embedding(&features).unwrap();
        let mut oracle = ArtifactOracle::new(&art, &emb);
        let mut logq_oracle = 0.0;
        for (t, e) in entries.iter().enumerate() {
            let prior = crate::distributions::DistributionSpec::normal(0.0, 1.0).unwrap();
            let req = ProposalRequest {
                address: &e.address,
                instance: e.instance,
                proposal_type: &e.proposal_type,
                prior: &prior,
                previous_value: if t == 0 { None } else { Some(&entries[t - 1].value) },
            };
            let eta = oracle.propose(&req).unwrap();
            logq_oracle += e.proposal_type.log_q_with_grad(&eta, &e.value).unwrap().0;
        }
        let mut tape = Tape::new(&art.params);
        let node = art.trace_log_q(&mut tape, &features, &entries).unwrap();
        assert!((tape.scalar(node) - logq_oracle).abs() < 1e-12);
    }

    #[test]
    fn oracle_reports_unseen_pairs() {
        let art = trained_like();
        let emb = art.observation_embedding(&[0.0; 3]).unwrap();
        let mut oracle = ArtifactOracle::new(&art, &emb);
        let prior = crate::distributions::DistributionSpec::normal(0.0, 1.0).unwrap();
        let a = Address::new("mu").unwrap();
        let req = ProposalRequest {
            address: &a,
            instance: 3,
            proposal_type: &ProposalType::UniformContinuous { low: -1.0, high: 1.0 },
            prior: &prior,
            previous_value: None,
        };
        assert_eq!(oracle.propose(&req), Err(OracleError::UnseenKey(a.clone(), 3)));
    }

    #[test]
    fn trace_loss_gradients_match_finite_differences() {
        let art = trained_like();
        let features = [0.3, -0.2, 0.9];
        let entries = sample_entries();
        let loss = |store: &ParamStore| {
            let mut a = art.clone();
            a.params = store.clone();
            let mut tape = Tape::new(&a.params);
            let n = a.trace_log_q(&mut tape, &features, &entries).unwrap();
            let mut g = Gradients::new();
            tape.backward(n, &mut g).unwrap();
            (tape.scalar(n), g)
        };
        let (_, grads) = loss(&art.params);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (id, p) in art.params.iter() {
            let analytic = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.tensor.len()]);
            for (k, &a) in analytic.iter().enumerate() {
                let mut up = art.params.clone();
                up.tensor_mut(id).data[k] += h;
                let mut dn = art.params.clone();
                dn.tensor_mut(id).data[k] -= h;
                let num = (loss(&up).0 - loss(&dn).0) / (2.0 * h);
                // Gradients below 1e-5 are compared absolutely; central
                // differences cannot resolve them to 1e-4 relative.
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-5);
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }
}
