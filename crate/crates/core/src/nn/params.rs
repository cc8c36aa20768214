use std::collections::BTreeMap;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to an entry of a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub first_moment: Tensor<F>,
    pub second_moment: Tensor<F>,
    pub trainable: bool,
}

/// Named tensors with gradients and optimizer state.
///
/// Entry order is insertion order and is what the checkpoint container
/// serializes, so two stores built by the same code are layout-identical.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<F> {
    entries: Vec<Param<F>>,
    by_name: BTreeMap<String, usize>,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let shape = value.shape().to_vec();
        let id = self.entries.len();
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(&shape),
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let p = &mut self.entries[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(&p.name, p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Replaces a value and resizes gradient and moment buffers to match.
    pub fn reshape_value(&mut self, id: ParamId, value: Tensor<F>) {
        let p = &mut self.entries[id.0];
        let shape = value.shape().to_vec();
        p.value = value;
        p.grad = Tensor::zeros(&shape);
        p.first_moment = Tensor::zeros(&shape);
        p.second_moment = Tensor::zeros(&shape);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.entries.iter_mut()
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect()
    }

    pub fn set_trainable(&mut self, ids: &[ParamId], trainable: bool) {
        for id in ids {
            self.entries[id.0].trainable = trainable;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(F::zero());
        }
    }

    pub fn reset_moments(&mut self) {
        for p in &mut self.entries {
            p.first_moment.fill(F::zero());
            p.second_moment.fill(F::zero());
        }
    }

    /// Zero-filled gradient buffer laid out like this store.
    pub fn grad_buffer(&self) -> Grads<F> {
        Grads { tensors: self.entries.iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }

    /// Adds a buffer into the stored gradients.
    pub fn accumulate(&mut self, grads: &Grads<F>) {
        for (p, g) in self.entries.iter_mut().zip(&grads.tensors) {
            p.grad.add_assign(g);
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParameterStore<G> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    first_moment: p.first_moment.cast(),
                    second_moment: p.second_moment.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Gradient buffer parallel to a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Grads<F> {
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(F::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_share_value_shape() {
        let mut s = ParameterStore::<f32>::new();
        let id = s.insert("w", Tensor::zeros(&[2, 3]), true).unwrap();
        let p = s.get(id);
        assert_eq!(p.grad.shape(), &[2, 3]);
        assert_eq!(p.first_moment.shape(), &[2, 3]);
        assert_eq!(p.second_moment.shape(), &[2, 3]);
        assert!(s.insert("w", Tensor::zeros(&[1]), true).is_err());
        assert!(s.set_value(id, Tensor::zeros(&[3, 2])).is_err());
    }
}
