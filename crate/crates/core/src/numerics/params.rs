use std::collections::HashMap;

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors with paired gradient buffers. Insertion order is
/// stable and is the order used by checkpoints and the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Mutable value and gradient of one parameter together.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {}: expected {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Bitwise equality of all names, shapes and values.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[1])).is_err());
        assert_eq!(s.grad(s.id("w").unwrap()).shape(), &[2, 2]);
    }

    #[test]
    fn set_value_checks_shape() {
        let mut s = ParamStore::new();
        let id = s.insert("b", Tensor::zeros(&[1, 3])).unwrap();
        assert!(s.set_value(id, Tensor::zeros(&[1, 2])).is_err());
        assert!(s.set_value(id, Tensor::full(&[1, 3], 2.0)).is_ok());
    }
}
