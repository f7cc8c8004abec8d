//! RMSprop without momentum and the per-epoch learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Kept for reference; decay is derived from `lr_floor` and `epochs`.
    pub gamma: f64,
    pub lr_floor: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Enhancement overfitting defaults.
    pub fn overfit() -> Self {
        Self {
            lr: 0.01,
            epochs: 26,
            gamma: 1e-4,
            lr_floor: 4e-4,
            seed: 0,
        }
    }

    /// Prior network pretraining defaults.
    pub fn pretrain() -> Self {
        Self {
            lr: 0.008,
            epochs: 25,
            gamma: 1e-4,
            lr_floor: 4e-4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.lr_floor.is_nan() || self.lr_floor <= 0.0 {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for epoch `e` (0-based): geometric decay from `lr`
    /// reaching `lr_floor` at the last epoch, never below the floor.
    pub fn lr_at(&self, e: usize) -> f64 {
        if self.epochs <= 1 || self.lr <= self.lr_floor {
            return self.lr.max(self.lr_floor);
        }
        let factor = (self.lr_floor / self.lr).powf(1.0 / (self.epochs - 1) as f64);
        (self.lr * factor.powi(e as i32)).max(self.lr_floor)
    }
}

pub struct RmsProp {
    beta: f64,
    eps: f64,
    sq: Vec<f64>,
    t: i32,
}

impl RmsProp {
    pub fn new(len: usize) -> Self {
        Self {
            beta: 0.99,
            eps: 1e-8,
            sq: vec![0.0; len],
            t: 0,
        }
    }

    /// `p -= lr * g / (sqrt(v_hat) + eps)` with a bias-corrected running mean of `g^2`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.sq.len());
        self.t += 1;
        let corr = 1.0 - self.beta.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.sq[i] = self.beta * self.sq[i] + (1.0 - self.beta) * g * g;
            let v = self.sq[i] / corr;
            params[i] -= lr * g / (v.sqrt() + self.eps);
        }
    }
}
