//! Momentum gradient descent.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Velocity buffers, one per parameter tensor, in parameter order.
#[derive(Clone, Debug, Default)]
pub struct SgdMomentum<T> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }

    /// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`
    pub fn step(&mut self, cfg: &SgdConfig, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        cfg.validate()?;
        if params.len() != grads.len() {
            return Err(Error::contract(format!("{} params but {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        }
        let (lr, mu, wd) = (T::lit(cfg.lr), T::lit(cfg.momentum), T::lit(cfg.weight_decay));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(param: f64, grad: f64, cfg: SgdConfig, opt: &mut SgdMomentum<f64>) -> f64 {
        let mut p = Tensor::vector(vec![param]);
        opt.step(&cfg, &mut [&mut p], &[Tensor::vector(vec![grad])]).unwrap();
        p.item()
    }

    #[test]
    fn plain_step() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let p = one_step(1.0, 2.0, cfg, &mut SgdMomentum::new());
        assert!((p - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        assert_eq!(one_step(1.5, 0.0, cfg, &mut SgdMomentum::new()), 1.5);
    }

    #[test]
    fn momentum_recurrence() {
        let cfg = SgdConfig { lr: 1.0, momentum: 0.9, weight_decay: 0.0 };
        let mut opt = SgdMomentum::new();
        let g = 0.5;
        let p1 = one_step(0.0, g, cfg, &mut opt);
        let mut p = Tensor::vector(vec![p1]);
        opt.step(&cfg, &mut [&mut p], &[Tensor::vector(vec![g])]).unwrap();
        assert!((opt.velocity[0].item() - 1.9 * g).abs() < 1e-12);
        assert!((p.item() - (p1 - 1.9 * g)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut opt = SgdMomentum::<f64>::new();
        let mut p = Tensor::vector(vec![1.0]);
        let g = [Tensor::vector(vec![1.0])];
        let bad_lr = SgdConfig { lr: 0.0, momentum: 0.0, weight_decay: 0.0 };
        assert!(opt.step(&bad_lr, &mut [&mut p], &g).is_err());
        let bad_mu = SgdConfig { lr: 0.1, momentum: 1.0, weight_decay: 0.0 };
        assert!(opt.step(&bad_mu, &mut [&mut p], &g).is_err());
    }
}
