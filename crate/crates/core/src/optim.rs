//! Adaptive-moment optimizer with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::{Dual, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from each parameter's accumulated `grad`. Parameters must
    /// come in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Dual]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Invariant(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if m.shape() != p.value.shape() {
                return Err(Error::dim("adamw", m.shape(), p.value.shape()));
            }
            if self.lr == 0.0 {
                continue;
            }
            let grad = p.grad.data().to_vec();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise() {
        let mut p = Dual::new(Tensor::vector(vec![0.1, -2.5, 3.25]));
        p.grad = Tensor::vector(vec![1.0, 1.0, -4.0]);
        let before = p.value.clone();
        let mut opt = AdamW::new(0.0, 0.01);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut p = Dual::new(Tensor::vector(vec![1.0, 1.0]));
        p.grad = Tensor::vector(vec![3.0, -0.2]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.value.data()[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let mut p = Dual::new(Tensor::vector(vec![2.0]));
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Dual::new(Tensor::vector(vec![3.0, -2.0]));
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..2000 {
            p.grad = p.value.scale(2.0);
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!(p.value.max_abs() < 1e-2);
    }
}
