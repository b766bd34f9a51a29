//! Named parameter storage and seeded initialisation.

use std::collections::BTreeMap;
use std::sync::Arc;

use mafn_tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Parameters keyed by dotted name (`stage1.attn.wq`), iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), Arc::new(value));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor<T>>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Replace the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Model(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian with standard deviation `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
}

/// Declares parameters in a fixed order and draws their initial values from
/// one seeded stream, so equal seeds give equal stores.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    store: ParamStore<f32>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        }
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        let name = name.into();
        assert!(
            !self.store.contains(&name),
            "parameter {name:?} declared twice"
        );
        let t = match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::full(shape.to_vec(), 1.0),
            Init::Normal(std) => Tensor::randn(shape.to_vec(), std, &mut self.rng),
            Init::FanIn { fan_in, gain } => {
                Tensor::randn(shape.to_vec(), gain / (fan_in.max(1) as f64).sqrt(), &mut self.rng)
            }
        };
        self.store.insert(name, t);
    }

    pub fn finish(self) -> ParamStore<f32> {
        self.store
    }
}
