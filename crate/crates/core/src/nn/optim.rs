use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Adam with decoupled weight decay and an optional cosine learning-rate
/// schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Total steps of the cosine schedule; `None` keeps `lr` constant.
    pub cosine_steps: Option<usize>,
    step: usize,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            cosine_steps: None,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn with_cosine(mut self, total_steps: usize) -> Self {
        self.cosine_steps = Some(total_steps.max(1));
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f32 {
        match self.cosine_steps {
            Some(total) => {
                let t = (self.step.min(total)) as f32 / total as f32;
                self.lr * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
            }
            None => self.lr,
        }
    }

    /// Applies one update. Gradients of frozen parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        // deterministic update order
        let mut order: Vec<&(ParamId, Tensor)> = grads.iter().collect();
        order.sort_by_key(|(id, _)| *id);
        for (id, g) in order {
            if !store.is_trainable(*id) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(*id);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
    }
}
