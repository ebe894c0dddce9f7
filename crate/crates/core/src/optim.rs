//! RMSProp with per-epoch exponential learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::params::{ParamGrads, Parameterized};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub lr_decay_per_epoch: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 4.5e-3,
            decay: 0.9,
            eps: 1.0,
            lr_decay_per_epoch: 0.94,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.decay) {
            return invalid("decay must lie in [0, 1)");
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return invalid("eps must be finite and non-negative");
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return invalid("lr_decay_per_epoch must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Running second moments for every parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    acc: Vec<Vec<f64>>,
    epoch: usize,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, model: &dyn Parameterized) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            acc: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
            epoch: 0,
        })
    }

    /// Learning rate in effect for the current epoch.
    pub fn lr(&self) -> f64 {
        self.config.lr * self.config.lr_decay_per_epoch.powi(self.epoch as i32)
    }

    pub fn end_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.acc
    }

    /// `acc <- decay acc + (1 - decay) g^2`, then `p <- p - lr g / sqrt(acc + eps)`.
    pub fn step(&mut self, model: &mut dyn Parameterized, grads: &ParamGrads) -> Result<()> {
        let lr = self.lr();
        let d = self.config.decay;
        let eps = self.config.eps;
        let mut params = model.params_mut();
        if params.len() != grads.grads.len() || params.len() != self.acc.len() {
            return invalid("optimizer state does not match the model");
        }
        for ((p, g), a) in params.iter_mut().zip(&grads.grads).zip(self.acc.iter_mut()) {
            if p.len() != g.len() || p.len() != a.len() {
                return invalid("gradient shape does not match parameter shape");
            }
            for ((pi, gi), ai) in p.iter_mut().zip(g).zip(a.iter_mut()) {
                *ai = d * *ai + (1.0 - d) * gi * gi;
                let denom = (*ai + eps).sqrt();
                if denom > 0.0 {
                    *pi -= lr * gi / denom;
                }
            }
        }
        Ok(())
    }
}
