use std::collections::HashMap;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named tensor with its gradient buffer. Frozen parameters
/// (`requires_grad == false`) get no gradient and are never updated.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub requires_grad: bool,
    pub grad: Vec<f64>,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            grad: vec![0.0; value.len()],
            value: Arc::new(value),
            requires_grad: true,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_requires_grad(&mut self, id: ParamId, requires_grad: bool) {
        self.params[id.0].requires_grad = requires_grad;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &GradSet) {
        for (id, g) in &grads.entries {
            let p = &mut self.params[id.0];
            for (dst, src) in p.grad.iter_mut().zip(g) {
                *dst += src;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales trainable gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in self.params.iter_mut().filter(|p| p.requires_grad) {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    /// Adds `coefficient · w` to the gradient of every trainable parameter.
    pub fn add_weight_decay(&mut self, coefficient: f64) {
        for p in self.params.iter_mut().filter(|p| p.requires_grad) {
            for (g, w) in p.grad.iter_mut().zip(p.value.data()) {
                *g += coefficient * w;
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

/// Gradients for a subset of parameters, as produced by one graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSet {
    pub entries: Vec<(ParamId, Vec<f64>)>,
}

impl GradSet {
    /// Adds `other` entry-wise. Both sets must come from the same model code
    /// so that they list the same parameters.
    pub fn add_assign(&mut self, other: &GradSet) {
        if self.entries.is_empty() {
            self.entries = other.entries.clone();
            return;
        }
        for ((ia, ga), (ib, gb)) in self.entries.iter_mut().zip(&other.entries) {
            debug_assert_eq!(ia, ib);
            for (a, b) in ga.iter_mut().zip(gb) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, g) in &mut self.entries {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}
