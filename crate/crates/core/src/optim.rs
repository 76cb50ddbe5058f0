//! First-order optimizers over a [`ParamStore`].

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::Graph;
use crate::nn::{Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Gradients of every bound parameter after a backward pass (`None` where
/// the loss did not reach the parameter).
pub fn collect_grads<T: Real>(g: &Graph<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
    bound.vars().iter().map(|&v| g.grad(v).cloned()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.numel()];
        Self {
            config,
            first: store.tensors().iter().map(zeros).collect(),
            second: store.tensors().iter().map(zeros).collect(),
            steps: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as f64;
        let bc1 = 1.0 - num_traits::Float::powf(c.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powf(c.beta2, t);
        let step = T::lit(c.lr * num_traits::Float::sqrt(bc2) / bc1);
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        let eps_hat = eps * T::lit(num_traits::Float::sqrt(bc2));
        for (i, param) in store.tensors_mut().iter_mut().enumerate() {
            let Some(grad) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, &gr), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gr;
                *vi = b2 * *vi + (T::one() - b2) * gr * gr;
                *p = *p - step * *mi / (vi.sqrt() + eps_hat);
            }
        }
    }
}

/// Plain gradient descent on a subset of parameters.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, ids: &[ParamId], grads: &[Option<Tensor<T>>], lr: f64) {
    let lr = T::lit(lr);
    for &id in ids {
        if let Some(grad) = grads.get(id.index()).and_then(Option::as_ref) {
            for (p, &gr) in store.get_mut(id).data_mut().iter_mut().zip(grad.data()) {
                *p = *p - lr * gr;
            }
        }
    }
}
