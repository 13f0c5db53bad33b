use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over several parameter slots (one per weight matrix or bias vector).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: f64,
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step_size: T,
    v_correction: T,
}

impl<T: Real> Adam<T> {
    pub fn new(slot_sizes: &[usize], lr: f64, cfg: AdamConfig) -> Self {
        Self {
            lr,
            cfg,
            step: 0,
            m: slot_sizes.iter().map(|&n| alloc::vec![T::zero(); n]).collect(),
            v: slot_sizes.iter().map(|&n| alloc::vec![T::zero(); n]).collect(),
            step_size: T::zero(),
            v_correction: T::one(),
        }
    }

    /// Advances the step counter; call once before the slot updates of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
        let bc1 = 1.0 - Float::powi(self.cfg.beta1, self.step);
        let bc2 = 1.0 - Float::powi(self.cfg.beta2, self.step);
        self.step_size = T::of(self.lr / bc1);
        self.v_correction = T::of(bc2);
    }

    pub fn update(&mut self, slot: usize, params: &mut [T], grads: &[T]) {
        let b1 = T::of(self.cfg.beta1);
        let b2 = T::of(self.cfg.beta2);
        let one = T::one();
        let eps = T::of(self.cfg.eps);
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let denom = (v[i] / self.v_correction).sqrt() + eps;
            params[i] -= self.step_size * m[i] / denom;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut opt = Adam::<f64>::new(&[2], 0.1, AdamConfig::default());
        let mut p = [1.0, -1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::<f64>::new(&[1], 0.05, AdamConfig::default());
        let mut p = [4.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            opt.begin_step();
            opt.update(0, &mut p, &g);
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }
}
