use serde::{Deserialize, Serialize};

use super::params::ParamStore;

/// Optimizer selection as it appears in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub trait Optimizer {
    /// Applies one update from the accumulated gradients. Parameters with
    /// `requires_grad == false` are skipped entirely.
    fn step(&mut self, store: &mut ParamStore);
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

pub fn build(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer + Send> {
    match kind {
        OptimizerKind::Sgd => Box::new(Sgd::new(lr)),
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Sgd {
        Sgd { lr }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) {
        for p in store.iter_mut().filter(|p| p.requires_grad) {
            let lr = self.lr;
            let grad = std::mem::take(&mut p.grad);
            for (w, g) in std::sync::Arc::make_mut(&mut p.value).data_mut().iter_mut().zip(&grad) {
                *w -= lr * g;
            }
            p.grad = grad;
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if self.m.len() <= i {
                self.m.push(Vec::new());
                self.v.push(Vec::new());
            }
            if !p.requires_grad {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != p.grad.len() {
                *m = vec![0.0; p.grad.len()];
                *v = vec![0.0; p.grad.len()];
            }
            let w = std::sync::Arc::make_mut(&mut p.value).data_mut();
            for j in 0..w.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}
