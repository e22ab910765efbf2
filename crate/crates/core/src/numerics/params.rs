use std::collections::HashMap;

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameters in insertion order.
///
/// The order is part of the checkpoint format, so models always register
/// their parameters in the same sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    buffers: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        t.requires_grad = true;
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        self.buffers.push(false);
        Ok(())
    }

    /// Registers a fixed buffer that is serialised but never trained.
    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        self.insert(name.clone(), t)?;
        let i = self.index[&name];
        self.entries[i].1.requires_grad = false;
        self.buffers[i] = true;
        Ok(())
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.index.get(name).is_some_and(|&i| self.buffers[i])
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Moves every parameter of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for ((n, t), buffer) in other.entries.into_iter().zip(other.buffers) {
            let trainable = t.requires_grad;
            if buffer {
                self.insert_buffer(n, t)?;
            } else {
                self.insert(n.clone(), t)?;
                self.get_mut(&n).unwrap().requires_grad = trainable;
            }
        }
        Ok(())
    }

    /// Toggles training for every parameter whose name starts with `prefix`.
    /// Buffers are never made trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for ((n, t), &buffer) in self.entries.iter_mut().zip(&self.buffers) {
            if n.starts_with(prefix) && !buffer {
                t.requires_grad = trainable;
            }
        }
    }

    /// Adds the gradients recorded for bound parameters into `Tensor::grad`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (name, var) in tape.bound_params() {
            let Some(g) = grads.get(var) else { continue };
            let Some(t) = self.get_mut(name) else { continue };
            if !t.requires_grad {
                continue;
            }
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.grad = None;
        }
    }

    /// Copies values of every parameter present in both stores.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for (n, t) in other.iter() {
            if let Some(dst) = self.get_mut(n) {
                if dst.shape() != t.shape() {
                    return Err(Error::shape(
                        "load_values",
                        format!("`{n}`: {:?} vs {:?}", dst.shape(), t.shape()),
                    ));
                }
                dst.data_mut().copy_from_slice(t.data());
            }
        }
        Ok(())
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}
