//! Neural proposal network: tensors, reverse-mode autodiff, the LSTM core,
//! the (address, instance)-keyed layer registry, Adam, and the artifact that
//! bundles them.

pub mod adam;
pub mod artifact;
pub mod layers;
pub mod params;
pub mod registry;
pub mod tape;

use thiserror::Error;

use crate::distributions::{DistributionError, ProposalType};
use crate::trace::Address;

pub use adam::{Adam, AdamConfig};
pub use artifact::{ArchConfig, ArtifactError, ArtifactOracle, ProposalArtifact, TrainingMetadata};
pub use layers::{Affine, LstmCell, LstmSession, LstmStack};
pub use params::{Gradients, ParamId, ParamStore, Tensor};
pub use registry::{LayerRegistry, RegisteredLayers};
pub use tape::{NodeId, Tape, TapeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("no layers registered for ({0}, {1})")]
    UnseenKey(Address, u32),
    #[error("address vocabulary is full ({max} addresses) while registering {address}; increase max_addresses")]
    AddressCapacity { address: Address, max: usize },
    #[error("instance {instance} of {address} exceeds max_instances = {max}; increase max_instances")]
    InstanceCapacity { address: Address, instance: u32, max: usize },
    #[error("{address} is registered with proposal type {registered:?}, trace has {requested:?}")]
    ProposalTypeMismatch { address: Address, registered: ProposalType, requested: ProposalType },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}
