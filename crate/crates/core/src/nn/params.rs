use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{contract, Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Named trainable tensors plus the subset that is frozen.
///
/// Frozen tensors carry `requires_grad = false`, are bound into graphs as
/// constants, and are skipped by the optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet<T: Element = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Element> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            tensors: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        let frozen = self.frozen.contains(&name);
        self.tensors.insert(name, tensor.with_grad(!frozen));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Drops every tensor whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
        self.frozen.retain(|k| !k.starts_with(prefix));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Binds a parameter into a graph under its own name.
    pub fn var(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(v) = g.binding(name) {
            return Ok(v);
        }
        let t = self.get(name)?;
        Ok(g.bind(name, t))
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        let t = self.get_mut(name)?;
        t.requires_grad = false;
        t.grad = None;
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for (name, t) in &mut self.tensors {
            t.requires_grad = false;
            t.grad = None;
            self.frozen.insert(name.clone());
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
        for t in self.tensors.values_mut() {
            t.requires_grad = true;
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    /// Total element count across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Element count of the tensors that are not frozen.
    pub fn trainable_numel(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| !self.frozen.contains(*k))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Copies gradients of every parameter bound in `g` into the
    /// corresponding gradient slots, accumulating.
    pub fn absorb_grads(&mut self, g: &Graph<T>) {
        for (name, t) in &mut self.tensors {
            if !t.requires_grad {
                continue;
            }
            if let Some(v) = g.binding(name) {
                if let Some(grad) = g.grad(v) {
                    t.accumulate_grad(grad);
                }
            }
        }
    }

    pub fn cast<U: Element>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Every tensor bitwise equal to its counterpart in `other`.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().all(|(k, t)| {
                other
                    .tensors
                    .get(k)
                    .is_some_and(|o| o.bitwise_eq(t))
            })
    }

    /// Replaces values from `other`, which must carry the same names and shapes.
    pub fn load_values(&mut self, other: &ParameterSet<T>) -> Result<()> {
        for (name, t) in &mut self.tensors {
            let src = other.get(name)?;
            if src.shape() != t.shape() {
                return Err(contract(format!(
                    "parameter `{name}` shape {:?} does not match {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Deterministic initializers used across the model zoo.
pub mod init {
    use super::*;

    /// Xavier/Glorot uniform for a `[fan_in, fan_out]` weight.
    pub fn xavier<T: Element, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64_lossy(dist.sample(rng)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }

    pub fn normal<T: Element, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("std > 0");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64_lossy(dist.sample(rng)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }

    pub fn zeros<T: Element>(shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape)
    }

    pub fn ones<T: Element>(shape: &[usize]) -> Tensor<T> {
        Tensor::full(shape, T::one())
    }
}
