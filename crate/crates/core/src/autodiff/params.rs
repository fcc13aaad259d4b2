use std::collections::{BTreeMap, HashMap};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{AutodiffError, Result};

/// A named tensor with an optional accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    /// Non-trainable entries hold running statistics (batch-norm buffers).
    pub trainable: bool,
}

/// All weights and buffers of a model, keyed by dotted path
/// (e.g. `edge.fe0.l1.w`). Iteration order is the sorted key order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { value, grad: None, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).map(|p| &p.value).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// Adds the tape gradients of bound leaves into the stored gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &HashMap<String, Var>) {
        for (name, var) in bound {
            let (Some(p), Some(g)) = (self.params.get_mut(name), tape.grad(*var)) else { continue };
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }

    /// Euclidean norm of each populated gradient.
    pub fn grad_norms(&self) -> BTreeMap<String, f64> {
        self.params
            .iter()
            .filter_map(|(k, p)| p.grad.as_ref().map(|g| (k.clone(), g.iter().map(|v| v * v).sum::<f64>().sqrt())))
            .collect()
    }

    /// Copies every entry of `other` whose name starts with `prefix`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) {
        for (k, p) in other.params.range(prefix.to_string()..) {
            if !k.starts_with(prefix) {
                break;
            }
            self.params.insert(k.clone(), Param { value: p.value.clone(), grad: None, trainable: p.trainable });
        }
    }
}
