//! SGD with momentum and additive weight decay.

use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Optimizer state: hyper-parameters plus one velocity tensor per parameter,
/// shape-matched at all times.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real> {
    lr: T,
    momentum: T,
    weight_decay: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Result<Self> {
        if !(lr > T::zero()) || !lr.is_finite() {
            return Err(config_err("lr", "learning rate must be positive"));
        }
        if momentum < T::zero() || momentum >= T::one() {
            return Err(config_err("momentum", "must lie in [0, 1)"));
        }
        if weight_decay < T::zero() {
            return Err(config_err("weight_decay", "must be nonnegative"));
        }
        Ok(Self { lr, momentum, weight_decay, velocity: Vec::new() })
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    /// One update: `g_eff = g + wd * p; v <- momentum * v + g_eff;
    /// p <- p - lr * v`. Velocity buffers are created on first use and must
    /// keep their shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err(
                "sgd_step",
                alloc::format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(shape_err(
                "sgd_step",
                alloc::format!("{} params, {} velocity buffers", params.len(), self.velocity.len()),
            ));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(shape_err(
                    "sgd_step",
                    alloc::format!("param {:?}, grad {:?}, velocity {:?}", p.shape(), g.shape(), v.shape()),
                ));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let g_eff = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + g_eff;
                *pv = *pv - self.lr * *vv;
            }
        }
        Ok(())
    }
}
