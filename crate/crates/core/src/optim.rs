use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Bias-corrected Adam over a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    config: AdamConfig,
    step: i32,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, shapes: &[[usize; 2]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update. `params` and `grads` must follow the order given at construction.
    ///
    /// # Panics
    /// If the parameter count or a shape differs from construction.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>]) {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        assert_eq!(grads.len(), self.first.len(), "gradient count mismatch");
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let one = S::one();
        let corr1 = one - b1.powi(self.step);
        let corr2 = one - b2.powi(self.step);
        let (lr, eps, wd) = (S::lit(c.lr), S::lit(c.eps), S::lit(c.weight_decay));
        for (k, p) in params.iter_mut().enumerate() {
            assert_eq!(p.shape(), grads[k].shape(), "gradient shape mismatch");
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (idx, (x, &g0)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
                let g = g0 + wd * *x;
                m[idx] = b1 * m[idx] + (one - b1) * g;
                v[idx] = b2 * v[idx] + (one - b2) * g * g;
                let m_hat = m[idx] / corr1;
                let v_hat = v[idx] / corr2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::row(&[1.0f64, -2.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &[p.shape()]);
        adam.step(&mut [&mut p], &[Tensor::row(&[3.0, -0.5])]);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-7);
        assert!((p.get(0, 1) + 1.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = Tensor::row(&[0.25f64]);
        let mut adam = Adam::new(AdamConfig::default(), &[p.shape()]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Tensor::zeros(1, 1)]);
        }
        assert_eq!(p.item(), 0.25);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::row(&[5.0f64]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &[p.shape()]);
        for _ in 0..500 {
            let g = Tensor::row(&[2.0 * (p.item() - 1.0)]);
            adam.step(&mut [&mut p], &[g]);
        }
        assert!((p.item() - 1.0).abs() < 1e-2);
    }
}
