use serde::{Deserialize, Serialize};

use super::{Network, Scalar};
use crate::error::{Error, Result};

/// Learning rate in effect from `from_epoch` (1-based) onwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPhase {
    pub from_epoch: usize,
    pub lr: f64,
}

/// Piecewise-constant learning rate over epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub phases: Vec<LrPhase>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            phases: vec![LrPhase { from_epoch: 1, lr }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.first().map(|p| p.from_epoch) != Some(1) {
            return Err(Error::config("learning-rate schedule must start at epoch 1"));
        }
        if self.phases.windows(2).any(|w| w[1].from_epoch <= w[0].from_epoch) {
            return Err(Error::config("learning-rate phases must be strictly increasing"));
        }
        if self.phases.iter().any(|p| !(p.lr > 0.0) || !p.lr.is_finite()) {
            return Err(Error::config("learning rates must be positive and finite"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.phases
            .iter()
            .take_while(|p| p.from_epoch <= epoch)
            .last()
            .map_or(self.phases[0].lr, |p| p.lr)
    }
}

/// SGD with heavy-ball momentum: `v <- mu v + g + wd theta; theta <- theta - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T, weight_decay: T, param_count: usize) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![T::zero(); param_count],
        }
    }

    pub fn step(&mut self, model: &mut Network<T>, grad: &[T], lr: T) {
        assert_eq!(grad.len(), self.velocity.len());
        for ((p, v), &g) in model.params_mut().iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p = *p - lr * *v;
        }
    }
}
