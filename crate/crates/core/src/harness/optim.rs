//! Optimizers over a fixed, ordered parameter list. A parameter is stepped
//! only while it is trainable and holds a gradient; frozen parameters keep
//! both their values and their optimizer state untouched.

use serde::{Deserialize, Serialize};

use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adamw,
}

#[derive(Clone, Debug)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    params: Vec<Tensor<T>>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    slots: Vec<Slot>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn sgd(params: Vec<Tensor<T>>, lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, params, lr, 0.9, 0.999, 1e-8, 0.0)
    }

    pub fn adamw(params: Vec<Tensor<T>>, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Adamw, params, lr, beta1, beta2, eps, weight_decay)
    }

    pub fn new(
        kind: OptimizerKind,
        params: Vec<Tensor<T>>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        let slots = params
            .iter()
            .map(|p| Slot { m: vec![0.0; p.numel()], v: vec![0.0; p.numel()], t: 0 })
            .collect();
        Optimizer { kind, params, lr, beta1, beta2, eps, weight_decay, slots }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Parameters that would be updated by the next [`Optimizer::step`].
    pub fn live(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].requires_grad() && self.params[i].grad().is_some())
            .collect()
    }

    /// Global L2 norm of the live gradients.
    pub fn grad_norm(&self) -> f64 {
        self.live()
            .iter()
            .map(|&i| {
                self.params[i]
                    .grad()
                    .expect("live")
                    .iter()
                    .map(|g| g.as_f64() * g.as_f64())
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update; gradients are multiplied by `grad_scale` first.
    pub fn step_scaled(&mut self, grad_scale: f64) {
        for i in self.live() {
            let p = &self.params[i];
            let g = p.grad().expect("live");
            let slot = &mut self.slots[i];
            slot.t += 1;
            let mut w = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in w.iter_mut().zip(&g) {
                        *x = T::lit(x.as_f64() - self.lr * gi.as_f64() * grad_scale);
                    }
                }
                OptimizerKind::Adamw => {
                    let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
                    let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
                    for (j, (x, gi)) in w.iter_mut().zip(&g).enumerate() {
                        let gj = gi.as_f64() * grad_scale;
                        slot.m[j] = self.beta1 * slot.m[j] + (1.0 - self.beta1) * gj;
                        slot.v[j] = self.beta2 * slot.v[j] + (1.0 - self.beta2) * gj * gj;
                        let mhat = slot.m[j] / bc1;
                        let vhat = slot.v[j] / bc2;
                        let mut xv = x.as_f64();
                        xv -= self.lr * self.weight_decay * xv;
                        xv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                        *x = T::lit(xv);
                    }
                }
            }
        }
    }

    pub fn step(&mut self) {
        self.step_scaled(1.0);
    }

    /// Clips the live gradients to `max_norm` (if given) and steps.
    pub fn clip_and_step(&mut self, max_norm: Option<f64>) -> f64 {
        let norm = self.grad_norm();
        let scale = match max_norm {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        self.step_scaled(scale);
        norm
    }

    /// Per-parameter update counts.
    pub fn step_counts(&self) -> Vec<u64> {
        self.slots.iter().map(|s| s.t).collect()
    }
}
