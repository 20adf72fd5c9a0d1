//! Per-(address, instance) sample-embedding and proposal layers, created on
//! first encounter during training, plus the one-hot vocabularies.

use std::collections::HashMap;

use rand::Rng;

use super::layers::Affine;
use super::params::ParamStore;
use super::NeuralError;
use crate::distributions::ProposalType;
use crate::trace::Address;

#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredLayers {
    pub address: Address,
    pub instance: u32,
    pub proposal_type: ProposalType,
    /// Maps the previous value's features to the sample embedding.
    pub sample_embedding: Affine,
    /// Maps the LSTM output to eta.
    pub proposal: Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRegistry {
    max_addresses: usize,
    max_instances: usize,
    addresses: Vec<Address>,
    address_index: HashMap<Address, usize>,
    layers: Vec<RegisteredLayers>,
    layer_index: HashMap<(Address, u32), usize>,
}

impl LayerRegistry {
    pub fn new(max_addresses: usize, max_instances: usize) -> Self {
        LayerRegistry {
            max_addresses,
            max_instances,
            addresses: Vec::new(),
            address_index: HashMap::new(),
            layers: Vec::new(),
            layer_index: HashMap::new(),
        }
    }

    pub fn max_addresses(&self) -> usize {
        self.max_addresses
    }

    pub fn max_instances(&self) -> usize {
        self.max_instances
    }

    /// Address vocabulary in registration order.
    pub fn addresses(&self) -> &[Address] {
        &self.addresses
    }

    pub fn address_index(&self, a: &Address) -> Option<usize> {
        self.address_index.get(a).copied()
    }

    /// Registered layers in registration order.
    pub fn layers(&self) -> &[RegisteredLayers] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Inference-time lookup: unregistered pairs yield `UnseenKey`.
    pub fn get(&self, a: &Address, instance: u32) -> Result<&RegisteredLayers, NeuralError> {
        self.layer_index
            .get(&(a.clone(), instance))
            .map(|&i| &self.layers[i])
            .ok_or_else(|| NeuralError::UnseenKey(a.clone(), instance))
    }

    /// Training-time lookup that creates and registers layers on first
    /// encounter of `(a, instance)`.
    #[allow(clippy::too_many_arguments)]
    pub fn get_or_create<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rng: &mut R,
        a: &Address,
        instance: u32,
        ptype: ProposalType,
        hidden: usize,
        sample_embed_dim: usize,
    ) -> Result<&RegisteredLayers, NeuralError> {
        if let Some(&i) = self.layer_index.get(&(a.clone(), instance)) {
            let layers = &self.layers[i];
            if layers.proposal_type != ptype {
                return Err(NeuralError::ProposalTypeMismatch {
                    address: a.clone(),
                    registered: layers.proposal_type,
                    requested: ptype,
                });
            }
            return Ok(&self.layers[i]);
        }
        if instance == 0 || instance as usize > self.max_instances {
            return Err(NeuralError::InstanceCapacity { address: a.clone(), instance, max: self.max_instances });
        }
        if !self.address_index.contains_key(a) {
            if self.addresses.len() >= self.max_addresses {
                return Err(NeuralError::AddressCapacity { address: a.clone(), max: self.max_addresses });
            }
            self.address_index.insert(a.clone(), self.addresses.len());
            self.addresses.push(a.clone());
        }
        let name = format!("{a}#{instance}");
        let sample_embedding =
            Affine::init(store, &format!("smp.{name}"), ptype.value_feature_dim(), sample_embed_dim, rng);
        let proposal = Affine::init(store, &format!("prop.{name}"), hidden, ptype.param_dim(), rng);
        self.insert(RegisteredLayers {
            address: a.clone(),
            instance,
            proposal_type: ptype,
            sample_embedding,
            proposal,
        });
        Ok(self.layers.last().unwrap())
    }

    /// Rebuilds the vocabularies from persisted state.
    pub(crate) fn restore(
        max_addresses: usize,
        max_instances: usize,
        addresses: Vec<Address>,
        layers: Vec<RegisteredLayers>,
    ) -> Self {
        let mut r = LayerRegistry::new(max_addresses, max_instances);
        for a in addresses {
            r.address_index.insert(a.clone(), r.addresses.len());
            r.addresses.push(a);
        }
        for l in layers {
            r.insert(l);
        }
        r
    }

    fn insert(&mut self, layers: RegisteredLayers) {
        self.layer_index.insert((layers.address.clone(), layers.instance), self.layers.len());
        self.layers.push(layers);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn addr(s: &str) -> Address {
        Address::new(s).unwrap()
    }

    #[test]
    fn create_then_reuse() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reg = LayerRegistry::new(8, 4);
        let first =
            reg.get_or_create(&mut store, &mut rng, &addr("mu"), 1, ProposalType::Normal, 6, 3).unwrap().clone();
        assert_eq!(reg.len(), 1);
        assert_eq!(reg.addresses().len(), 1);
        let params_after_first = store.len();
        let again =
            reg.get_or_create(&mut store, &mut rng, &addr("mu"), 1, ProposalType::Normal, 6, 3).unwrap().clone();
        assert_eq!(first, again);
        assert_eq!(reg.len(), 1);
        assert_eq!(store.len(), params_after_first);
        assert_eq!(first.proposal.input_dim, 6);
        assert_eq!(first.proposal.output_dim, 2);
        assert_eq!(first.sample_embedding.output_dim, 3);
    }

    #[test]
    fn inference_lookup_of_unregistered_pair() {
        let reg = LayerRegistry::new(8, 4);
        assert_eq!(reg.get(&addr("z"), 7).unwrap_err(), NeuralError::UnseenKey(addr("z"), 7));
    }

    #[test]
    fn capacities_enforced() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reg = LayerRegistry::new(1, 2);
        reg.get_or_create(&mut store, &mut rng, &addr("a"), 2, ProposalType::Normal, 4, 2).unwrap();
        assert!(matches!(
            reg.get_or_create(&mut store, &mut rng, &addr("a"), 3, ProposalType::Normal, 4, 2),
            Err(NeuralError::InstanceCapacity { instance: 3, max: 2, .. })
        ));
        assert!(matches!(
            reg.get_or_create(&mut store, &mut rng, &addr("b"), 1, ProposalType::Normal, 4, 2),
            Err(NeuralError::AddressCapacity { max: 1, .. })
        ));
        assert!(matches!(
            reg.get_or_create(&mut store, &mut rng, &addr("a"), 2, ProposalType::Categorical { categories: 2 }, 4, 2),
            Err(NeuralError::ProposalTypeMismatch { .. })
        ));
    }

    #[test]
    fn address_indices_are_stable() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reg = LayerRegistry::new(8, 8);
        for (a, i) in [("x", 1), ("y", 1), ("x", 2), ("z", 1), ("y", 2)] {
            reg.get_or_create(&mut store, &mut rng, &addr(a), i, ProposalType::Normal, 4, 2).unwrap();
        }
        assert_eq!(reg.address_index(&addr("x")), Some(0));
        assert_eq!(reg.address_index(&addr("y")), Some(1));
        assert_eq!(reg.address_index(&addr("z")), Some(2));
    }
}
