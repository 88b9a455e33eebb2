use std::collections::BTreeMap;

use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A named trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// A pending write to a non-trainable buffer produced during a forward pass
/// (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct BufferUpdate {
    pub id: BufferId,
    pub value: Vec<f64>,
}

/// Named trainable parameters plus non-trainable buffers.
///
/// Registration order is part of the model definition: checkpoints and
/// optimizer state are laid out in this order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<(String, Tensor)>,
    names: BTreeMap<String, usize>,
    buffer_names: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) || self.buffer_names.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let id = self.params.len();
        self.names.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: vec![0.0; value.numel()],
            value,
        });
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<BufferId> {
        let name = name.into();
        if self.names.contains_key(&name) || self.buffer_names.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let id = self.buffers.len();
        self.buffer_names.insert(name.clone(), id);
        self.buffers.push((name, value));
        Ok(BufferId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.names
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn buffer_by_name(&self, name: &str) -> Option<&Tensor> {
        self.buffer_names.get(name).map(|&i| &self.buffers[i].1)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.buffers.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<BufferUpdate>) {
        for u in updates {
            self.buffers[u.id.0].1.data_mut().copy_from_slice(&u.value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            s.add("a.weight", Tensor::zeros(&[2])),
            Err(Error::DuplicateName(_))
        ));
        assert!(s.add_buffer("a.weight", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn zero_grad_resets_exactly() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[3])).unwrap();
        s.get_mut(id).grad.copy_from_slice(&[1.5, -2.0, 1e-300]);
        s.zero_grad();
        assert_eq!(s.get(id).grad, vec![0.0; 3]);
        assert_eq!(s.num_scalars(), 3);
    }
}
