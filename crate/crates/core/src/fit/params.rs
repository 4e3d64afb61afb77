//! Named parameter storage.
//!
//! Every learnable tensor is registered under a unique dotted name. The
//! ordered name list drives checkpointing, the optimizer's per-layer trust
//! ratio and deterministic iteration.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub struct ParamStore<E: Element> {
    names: Vec<String>,
    map: HashMap<String, Tensor<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            map: HashMap::new(),
        }
    }

    /// Register a tensor under `name`; names must be unique.
    pub fn insert(&mut self, name: &str, t: Tensor<E>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::InvalidArg(format!("duplicate parameter `{name}`")));
        }
        self.names.push(name.to_string());
        self.map.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter `{name}`")))
    }

    /// Replace the value of an existing parameter (same shape required).
    pub fn set(&mut self, name: &str, t: Tensor<E>) -> Result<()> {
        let old = self.get(name)?;
        if old.shape() != t.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}`: shape {:?} cannot replace {:?}",
                t.shape(),
                old.shape()
            )));
        }
        self.map.insert(name.to_string(), t);
        Ok(())
    }

    /// Registration-ordered parameter names.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(|n| (n.as_str(), &self.map[n]))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Untracked view of all parameters (shares buffers). Forward passes
    /// through a detached store record no graph and receive no gradients.
    pub fn detached(&self) -> ParamStore<E> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.insert(name, t.detach()).expect("names already unique");
        }
        out
    }

    /// Deep copy with fresh tracked leaves (used when loading checkpoints
    /// and by the EMA shadow).
    pub fn to_tracked(&self) -> Result<ParamStore<E>> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.insert(name, Tensor::var(t.data().to_vec(), t.shape())?)?;
        }
        Ok(out)
    }

    pub fn cast<F: Element>(&self) -> Result<ParamStore<F>> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.insert(name, t.cast::<F>()?.to_var()?)?;
        }
        Ok(out)
    }
}

/// Builder used during initialization: tracked leaves, deterministic order.
pub struct ParamInit<'a, E: Element> {
    pub store: ParamStore<E>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, E: Element> ParamInit<'a, E> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        ParamInit {
            store: ParamStore::new(),
            rng,
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n)
            .map(|_| E::from_f64(std * self.rng.sample::<f64, _>(StandardNormal)))
            .collect();
        self.store.insert(name, Tensor::var(data, shape)?)
    }

    /// Weight matrix with `1/sqrt(fan_in)` scaling.
    pub fn linear_weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.normal(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.store
            .insert(name, Tensor::var(vec![E::zero(); shape.iter().product()], shape)?)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.store
            .insert(name, Tensor::var(vec![E::one(); shape.iter().product()], shape)?)
    }
}
