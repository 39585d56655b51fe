use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::config::{OptimConfig, OptimizerKind};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Per-parameter optimizer buffers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Slot {
    /// Updates applied so far.
    pub step: u64,
    /// Adam first moment or SGD velocity.
    pub first: Vec<f32>,
    /// Adam second moment (empty for SGD).
    pub second: Vec<f32>,
}

/// One Adam update with bias correction.
pub fn adam_step(param: &mut [f32], grad: &[f32], slot: &mut Slot, lr: f32, weight_decay: f32) {
    if slot.first.len() != param.len() {
        slot.first = vec![0.0; param.len()];
        slot.second = vec![0.0; param.len()];
    }
    slot.step += 1;
    let t = slot.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let step_size = lr / bc1;
    let bc2_sqrt = bc2.sqrt();
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut slot.first).zip(&mut slot.second) {
        let g = g + weight_decay * *p;
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let denom = v.sqrt() / bc2_sqrt + ADAM_EPS;
        *p -= step_size * *m / denom;
    }
}

/// One SGD update with momentum: `v ← μv + g`, `p ← p − lr·v`.
pub fn sgd_momentum_step(param: &mut [f32], grad: &[f32], slot: &mut Slot, lr: f32, momentum: f32, weight_decay: f32) {
    if slot.first.len() != param.len() {
        slot.first = vec![0.0; param.len()];
    }
    slot.step += 1;
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(&mut slot.first) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Optimizer state for every parameter of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(config: &OptimConfig, params: usize) -> Self {
        Optimizer {
            kind: config.kind,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            slots: vec![Slot::default(); params],
        }
    }

    /// Updates each parameter that has a gradient; the others, and their
    /// buffers, are left untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f32>>], lr: f64) {
        let lr = lr as f32;
        let wd = self.weight_decay as f32;
        for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let Some(grad) = grad else { continue };
            match self.kind {
                OptimizerKind::Adam => adam_step(param.data_mut(), grad, slot, lr, wd),
                OptimizerKind::SgdMomentum => {
                    sgd_momentum_step(param.data_mut(), grad, slot, lr, self.momentum as f32, wd)
                }
            }
        }
    }
}
