//! Named parameter storage, gradient buffers, and initialisers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id])
    }

    pub(crate) fn tensor_at(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub(crate) fn tensor_at_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Vec<f32>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            grads: store.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub(crate) fn add_at(&mut self, id: usize, g: &[f32]) {
        self.grads[id].iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    /// Adds `other` element-wise.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn get(&self, store: &ParamStore, name: &str) -> Result<&[f32]> {
        Ok(&self.grads[store.id(name)?])
    }

    pub(crate) fn at(&self, id: usize) -> &[f32] {
        &self.grads[id]
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn truncated_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f32 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Kaiming-normal initialisation for a convolution weight `[O, C, k..]` (fan-in = C·Πk).
pub fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in.max(1) as f32).sqrt();
    let normal = Normal::new(0.0f32, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

/// Uniform draw in `[lo, hi)`; re-exported for model builders.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    rng.random_range(lo..hi)
}
