//! Named parameter store.
//!
//! Weights live here as plain tensors keyed by hierarchical names
//! (`video.block00.attn.wq`, ...). The map is ordered, so iteration,
//! optimizer updates, and serialization all run in one deterministic order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate param {name}");
        self.map.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("unknown parameter {name}")))
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                if slot.shape() != t.shape() {
                    return Err(Error::shape(
                        "params",
                        format!("{name}: {:?} vs {:?}", slot.shape(), t.shape()),
                    ));
                }
                *slot = t;
                Ok(())
            }
            None => Err(Error::invalid("params", format!("unknown parameter {name}"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }
}

/// Parameters bound into a tape for one forward pass. Each parameter is
/// leafed exactly once so gradient contributions from every use accumulate
/// on one node.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Bind every parameter. `requires_grad` decides per name whether the
    /// leaf participates in differentiation.
    pub fn bind(tape: &mut Tape, store: &ParamStore, requires_grad: impl Fn(&str) -> bool) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in store.iter() {
            let var = tape.leaf(tensor.clone(), requires_grad(name));
            vars.insert(name.to_string(), var);
        }
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("params", format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
