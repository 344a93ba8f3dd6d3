//! First-order optimizers over a full parameter set.

use serde::{Deserialize, Serialize};

use crate::model::params::Params;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: i32,
    m: Option<Params<f32>>,
    v: Option<Params<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: None,
            v: None,
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => params.axpy(-self.lr, grads),
            OptimizerKind::Adam => {
                let m = self.m.get_or_insert_with(|| grads.zeros_like());
                let v = self.v.get_or_insert_with(|| grads.zeros_like());
                let bc1 = 1.0 - self.beta1.powi(self.step);
                let bc2 = 1.0 - self.beta2.powi(self.step);
                let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
                let gs = grads.named();
                let ms = m.named_mut();
                let vs = v.named_mut();
                for ((((_, p), (_, g)), (_, mt)), (_, vt)) in params.named_mut().into_iter().zip(gs).zip(ms).zip(vs) {
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        mt.data[i] = b1 * mt.data[i] + (1.0 - b1) * gi;
                        vt.data[i] = b2 * vt.data[i] + (1.0 - b2) * gi * gi;
                        let mhat = mt.data[i] / bc1;
                        let vhat = vt.data[i] / bc2;
                        p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Rescale `grads` so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut Params<f32>, max_norm: f32) -> f32 {
    let norm = grads.sum_sq().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
