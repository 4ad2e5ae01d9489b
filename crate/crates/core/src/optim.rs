//! Adam with a warmup + cosine learning-rate schedule.

use std::collections::HashSet;

use crate::autograd::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: 1,
            min_lr_ratio: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

/// Optimizer state; moments exist only for parameters in the trainable set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: usize,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    trainable: Vec<bool>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, trainable: &HashSet<ParamId>) -> Self {
        let n = store.len();
        Self {
            config,
            step: 0,
            m: vec![None; n],
            v: vec![None; n],
            trainable: (0..n).map(|i| trainable.contains(&i)).collect(),
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.get(id).copied().unwrap_or(false)
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn restore_mask(&mut self, mask: Vec<bool>) {
        self.trainable = mask;
    }

    /// Applies one update; gradients for frozen parameters are ignored.
    /// Returns the pre-clip global gradient norm over trainable parameters.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> f64 {
        let norm = grads
            .iter()
            .filter(|(id, _)| self.is_trainable(*id))
            .map(|(_, g)| g.sq_norm())
            .sum::<f64>()
            .sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (id, g) in grads {
            if !self.is_trainable(*id) {
                continue;
            }
            let p = store.get_mut(*id);
            let m = self.m[*id].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v[*id].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let wd = self.config.weight_decay;
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gi = gi * clip;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * (mhat / (vhat.sqrt() + self.config.eps) + wd * *pi);
            }
        }
        norm
    }
}
