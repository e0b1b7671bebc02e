//! Adam with a constant learning rate and no warmup.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{Gradients, Parameters, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected update of one flat tensor at step `t` (1-based).
    /// Moments are kept in `f32`, the arithmetic is `f64`.
    pub fn update_slice(&self, t: u64, p: &mut [f32], g: &[f64], m: &mut [f32], v: &mut [f32]) {
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..p.len() {
            let mi = self.beta1 * f64::from(m[i]) + (1.0 - self.beta1) * g[i];
            let vi = self.beta2 * f64::from(v[i]) + (1.0 - self.beta2) * g[i] * g[i];
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            p[i] = (f64::from(p[i]) - step) as f32;
        }
    }

    pub fn step(&self, params: &mut Parameters, grads: &Gradients, state: &mut AdamState) {
        state.step += 1;
        let t = state.step;
        let ps = params.named_tensors_mut();
        let gs = grads.named_tensors();
        let ms = state.m.named_tensors_mut();
        let vs = state.v.named_tensors_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            self.update_slice(t, &mut p.1.data, &g.1.data, &mut m.1.data, &mut v.1.data);
        }
    }
}

/// First and second moments plus the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Params<f32>,
    pub v: Params<f32>,
}

impl AdamState {
    pub fn new(config: &ModelConfig) -> Self {
        AdamState {
            step: 0,
            m: Params::zeros_like(config),
            v: Params::zeros_like(config),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first step exactly lr * sign(g)
        let adam = Adam::new(0.01);
        let mut p = [1.0f32, 1.0];
        let (mut m, mut v) = ([0.0f32; 2], [0.0f32; 2]);
        adam.update_slice(1, &mut p, &[0.5, -2.0], &mut m, &mut v);
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let adam = Adam::new(0.1);
        let mut p = [0.25f32];
        let (mut m, mut v) = ([0.0f32], [0.0f32]);
        adam.update_slice(1, &mut p, &[0.0], &mut m, &mut v);
        assert_eq!(p[0], 0.25);
    }
}
