use std::collections::HashMap;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<T: Element> {
    name: String,
    value: Tensor<T>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        Ok(Parameter {
            name: name.into(),
            value: Tensor::leaf(shape, data)?,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.value.grad()
    }

    /// Replaces the value with a fresh leaf; the gradient accumulator starts empty.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        self.value = Tensor::leaf(self.value.shape().to_vec(), data)?;
        Ok(())
    }
}

/// Ordered parameters with unique hierarchical names (e.g. `enc.l1.conv0.weight`).
#[derive(Clone, Debug, Default)]
pub struct ParameterSet<T: Element> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a parameter and returns its slot.
    pub fn push(&mut self, param: Parameter<T>) -> Result<usize> {
        if self.index.contains_key(param.name()) {
            return Err(Error::Config(format!("duplicate parameter name {}", param.name())));
        }
        let slot = self.params.len();
        self.index.insert(param.name().to_string(), slot);
        self.params.push(param);
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Parameter<T> {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Parameter<T> {
        &mut self.params[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value().numel()).sum()
    }

    /// Sets every accumulator to exactly zero.
    pub fn zero_grads(&self) {
        for p in &self.params {
            p.value().zero_grad();
        }
    }
}
