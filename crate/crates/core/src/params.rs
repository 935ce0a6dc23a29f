//! Named, ordered collections of trainable tensors.

use indexmap::IndexMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The trainable tensors of one model instance, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T: Scalar = f64> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) {
        tensor.set_requires_grad(true);
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v)))
                .collect(),
        }
    }

    /// Records every tensor on `tape` as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v)))
                .collect(),
        }
    }

    /// Stores the gradients from a backward pass on each tensor, replacing
    /// any previous gradient. Parameters the loss did not reach get zeros.
    pub fn absorb_grads(&mut self, grads: &Gradients<T>, bound: &BoundParams<'_, T>) -> Result<()> {
        for (name, tensor) in self.tensors.iter_mut() {
            let var = bound.get(name)?;
            let g = grads
                .get_raw(var)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); tensor.numel()]);
            tensor.set_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Largest absolute elementwise difference over all tensors (names must match).
    pub fn max_abs_diff(&self, other: &ModelParams<T>) -> Result<f64> {
        let mut worst = 0.0f64;
        for (name, t) in &self.tensors {
            let o = other
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            worst = worst.max(t.max_abs_diff(o)?);
        }
        Ok(worst)
    }
}

/// Parameters recorded on a tape, looked up by name during a forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams<'t, T: Scalar = f64> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    pub fn from_vars<'a>(named: impl IntoIterator<Item = (&'a str, Var<'t, T>)>) -> Self {
        BoundParams {
            vars: named.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
