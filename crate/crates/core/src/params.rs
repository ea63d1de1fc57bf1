use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

static NEXT_TAG: AtomicU64 = AtomicU64::new(0);

fn fresh_tag() -> u64 {
    NEXT_TAG.fetch_add(1, Ordering::Relaxed)
}

/// Named, ordered collection of trainable tensors.
///
/// Every store (including every clone) carries a distinct tag so that several
/// stores can be bound into one [`Graph`] without their ids colliding.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore { tag: fresh_tag(), names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            tag: fresh_tag(),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Structure(format!("duplicate parameter path {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Pulls gradients for every parameter bound into `graph` after its backward pass.
    pub fn accumulate_grads(&mut self, graph: &Graph) -> Result<()> {
        for (id, grad) in graph.param_grads(self)? {
            self.tensors[id.0].accumulate_grad(grad)?;
        }
        Ok(())
    }

    /// Snapshot of every gradient slot, `None` where absent.
    pub fn grad_snapshot(&self) -> Vec<Option<Vec<f64>>> {
        self.tensors.iter().map(|t| t.grad().map(<[f64]>::to_vec)).collect()
    }
}
