//! Named parameter storage shared by models, optimizers and checkpoints.

use std::collections::HashMap;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable parameters receive gradients; buffers (running statistics)
/// are carried along but never differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    kind: ParamKind,
    tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {}", name)));
        }
        let mut tensor = tensor;
        tensor.set_requires_grad(kind == ParamKind::Trainable);
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, kind, tensor });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, ParamKind, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), e.kind, &e.tensor))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Records every entry on `tape`: trainables as differentiable leaves,
    /// buffers as constants. The result is indexed by [`ParamId`].
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => tape.param(e.tensor.clone()),
                ParamKind::Buffer => tape.constant(e.tensor.clone()),
            })
            .collect()
    }

    /// Adds the gradients of the bound leaves into each trainable
    /// tensor's gradient buffer.
    pub fn accumulate_grads(&mut self, vars: &[Var<'_>], grads: &Gradients) -> Result<()> {
        if vars.len() != self.entries.len() {
            return Err(shape_err!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.entries.len()
            ));
        }
        for (e, &v) in self.entries.iter_mut().zip(vars) {
            if e.kind != ParamKind::Trainable {
                continue;
            }
            match grads.raw(v) {
                Some(g) => e.tensor.accumulate_grad(g)?,
                None => e.tensor.accumulate_grad(&vec![0.0; e.tensor.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// True when both stores have the same names, kinds and shapes in the
    /// same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.kind == b.kind && a.tensor.shape() == b.tensor.shape()
            })
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect()
    }

    /// Overwrites values by name. Every entry must be present with a
    /// matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &mut self.entries {
            let t = by_name
                .get(e.name.as_str())
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks parameter {}", e.name)))?;
            if t.shape() != e.tensor.shape() {
                return Err(shape_err!(
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                ));
            }
            e.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", ParamKind::Trainable, Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", ParamKind::Buffer, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn buffers_get_no_gradient() {
        let mut s = ParamStore::new();
        let w = s.add("w", ParamKind::Trainable, Tensor::ones(&[2])).unwrap();
        let b = s.add("b", ParamKind::Buffer, Tensor::ones(&[2])).unwrap();
        let tape = Tape::new();
        let vars = s.bind(&tape);
        let loss = vars[w.index()].mul(vars[b.index()]).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        s.accumulate_grads(&vars, &grads).unwrap();
        assert_eq!(s.get(w).grad().unwrap(), &[1.0, 1.0]);
        assert!(s.get(b).grad().is_none());
        assert_eq!(s.trainable_count(), 2);
    }
}
