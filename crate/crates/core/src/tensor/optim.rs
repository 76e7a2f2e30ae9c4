use std::collections::HashMap;

use super::{Real, Tensor};
use crate::{Error, Result};

/// A named trainable tensor with its Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.numel();
        Parameter { name: name.into(), value, m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }
}

/// Ordered parameter collection with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter::new(name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.params[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies the values into another precision; optimizer state starts fresh.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.cast()).expect("names are unique");
        }
        out
    }
}

/// Bias-corrected Adam without weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam { lr, ..Adam::default() }
    }

    /// One update. `grads[i]` belongs to the i-th parameter; `None` means zero.
    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (p, g) in params.params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape(format!("gradient for `{}`: {:?} vs {:?}", p.name, g.shape(), p.value.shape())));
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        let one = T::one();
        for (p, g) in params.params.iter_mut().zip(grads) {
            let n = p.value.numel();
            let data = p.value.data_mut();
            for i in 0..n {
                let gi = g.as_ref().map_or(T::zero(), |g| g.data()[i]);
                p.m[i] = b1 * p.m[i] + (one - b1) * gi;
                p.v[i] = b2 * p.v[i] + (one - b2) * gi * gi;
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
