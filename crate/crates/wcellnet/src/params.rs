//! Named parameter storage shared by layers, the optimizer, and
//! checkpoint I/O.
//!
//! A [`ParamStore`] owns every tensor that persists across training
//! iterations: trainable weights and the non-trainable buffers
//! (normalization running statistics). Gradients accumulate here until
//! explicitly zeroed, so two backward passes double them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn register(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::arg(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Adds `delta` into the stored gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f32]) {
        let g = self.params[id.0].grad.data_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in registration order, which is also the on-disk
    /// checkpoint record order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Total scalar count over trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_lookup_total() {
        let mut s = ParamStore::new();
        let a = s.register("w", Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(s.register("w", Tensor::zeros(&[1]), true).is_err());
        assert_eq!(s.id("w"), Some(a));
        assert_eq!(s.id("missing"), None);
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::zeros(&[3]), true).unwrap();
        s.accumulate_grad(id, &[1.0, 2.0, 3.0]);
        s.accumulate_grad(id, &[1.0, 2.0, 3.0]);
        assert_eq!(s.grad(id).data(), &[2.0, 4.0, 6.0]);
        s.zero_grads();
        assert_eq!(s.grad(id).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn trainable_count_skips_buffers() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::zeros(&[4]), true).unwrap();
        s.register("running_mean", Tensor::zeros(&[4]), false).unwrap();
        assert_eq!(s.trainable_count(), 4);
    }
}
