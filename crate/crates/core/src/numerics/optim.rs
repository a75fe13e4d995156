use std::collections::BTreeMap;

use super::{ParamSet, Real, Tensor};

/// Cosine interpolation from `start` (step 0) to `end` (step `total`).
pub fn cosine_schedule(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return start;
    }
    let t = (step.min(total) as f64) / total as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_grad: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_grad: 3.0,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Decay applies to names accepted by the `decays` predicate given at
/// construction; everything else is only moved by the gradient.
pub struct AdamW<T: Real = f32> {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
    decays: fn(&str) -> bool,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, decays: fn(&str) -> bool) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
            decays,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64, weight_decay: f64) -> f64 {
        self.step += 1;
        let norm = params.grad_norm();
        let clip = if self.cfg.clip_grad > 0.0 && norm > self.cfg.clip_grad {
            self.cfg.clip_grad / (norm + 1e-6)
        } else {
            1.0
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(grad) = p.grad.take() else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let decay = if (self.decays)(name) { weight_decay } else { 0.0 };
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let g = grad.data()[i].f64() * clip;
                let mi = b1 * m.data()[i].f64() + (1.0 - b1) * g;
                let vi = b2 * v.data()[i].f64() + (1.0 - b2) * g * g;
                m.data_mut()[i] = T::of(mi);
                v.data_mut()[i] = T::of(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.cfg.eps);
                let wi = w[i].f64();
                w[i] = T::of(wi - lr * (update + decay * wi));
            }
        }
        norm
    }
}
