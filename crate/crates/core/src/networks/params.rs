use std::collections::HashMap;

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named trainable tensors, each with a same-shaped gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Parameter(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(&value.shape));
        self.values.push(value);
        Ok(())
    }

    /// Uniform init in `+-scale`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-scale..=scale))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data))
    }

    fn idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.values[self.idx(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.idx(name)?;
        Ok(&mut self.values[i])
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.grads[self.idx(name)?])
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.idx(name)?;
        Ok(&mut self.grads[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// `(name, value, grad)` triples for optimizer updates.
    pub fn iter_mut_with_grads(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut())
            .zip(self.grads.iter())
            .map(|((n, v), g)| (n, v, g))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn scale_grads(&mut self, s: T) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn add_grads_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (i, name) in other.names.iter().enumerate() {
            self.grad_mut(name)?.add_assign(&other.grads[i]);
        }
        Ok(())
    }

    /// Same parameters with fresh zero gradients, converted to `U`.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(|g| Tensor::zeros(&g.shape)).collect(),
            index: self.index.clone(),
        }
    }

    /// Copy of names and values with zeroed gradients.
    pub fn fresh_grads(&self) -> ParamStore<T> {
        self.cast()
    }

    /// Same names and shapes with every value and gradient zero.
    pub fn zeros_like(&self) -> ParamStore<T> {
        let mut z = self.fresh_grads();
        for v in &mut z.values {
            v.data.iter_mut().for_each(|x| *x = T::zero());
        }
        z
    }
}
