use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered set of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateName(name));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape().to_vec());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    /// He-normal initialised weight: `N(0, 2 / fan_in)`.
    pub fn add_he_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| T::lit(rng.normal() * std));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: Vec<usize>, value: T) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Replaces parameter values by name. Every stored parameter must be
    /// present with an identical shape.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(NnError::Shape(format!(
                "checkpoint holds {} tensors, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        let mut staged = Vec::with_capacity(values.len());
        for (name, tensor) in values {
            let id = self.by_name.get(&name).copied().ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            if self.params[id].value.shape() != tensor.shape() {
                return Err(NnError::Shape(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    self.params[id].value.shape(),
                    tensor.shape()
                )));
            }
            staged.push((id, tensor));
        }
        for (id, tensor) in staged {
            self.params[id].value = tensor;
        }
        Ok(())
    }

    pub fn named_values(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add_zeros("w", vec![2]).unwrap();
        assert!(matches!(store.add_zeros("w", vec![3]), Err(NnError::DuplicateName(_))));
    }

    #[test]
    fn load_values_checks_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.add_zeros("w", vec![2]).unwrap();
        let bad = vec![("w".to_string(), Tensor::zeros(vec![3]))];
        assert!(store.load_values(bad).is_err());
        let good = vec![("w".to_string(), Tensor::full(vec![2], 1.5))];
        store.load_values(good).unwrap();
        assert_eq!(store.get(ParamId(0)).value.data(), &[1.5, 1.5]);
    }
}
