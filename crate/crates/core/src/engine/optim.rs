//! Plain SGD and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: u32,
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 5,
            min_delta: 1e-4,
        }
    }
}

/// Learning rate plus reduce-on-plateau bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    initial_lr: f64,
    lr: f64,
    best: f64,
    stagnant: u32,
    plateau: PlateauConfig,
}

impl OptimizerState {
    pub fn new(lr: f64, plateau: PlateauConfig) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(plateau.factor > 0.0 && plateau.factor <= 1.0) {
            return Err(Error::Config(format!(
                "plateau factor must be in (0, 1], got {}",
                plateau.factor
            )));
        }
        Ok(Self {
            initial_lr: lr,
            lr,
            best: f64::INFINITY,
            stagnant: 0,
            plateau,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn stagnant_epochs(&self) -> u32 {
        self.stagnant
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Restores the initial learning rate and forgets loss history.
    pub fn reset(&mut self) {
        self.lr = self.initial_lr;
        self.best = f64::INFINITY;
        self.stagnant = 0;
    }

    /// Feeds one epoch loss to the plateau schedule.
    pub fn scheduler_step(&mut self, epoch_loss: f64) {
        if epoch_loss < self.best - self.plateau.min_delta {
            self.best = epoch_loss;
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
        }
        if self.stagnant > self.plateau.patience {
            self.lr *= self.plateau.factor;
            self.stagnant = 0;
        }
    }
}

/// `p <- p - lr * grad` for every parameter. Rejects non-finite gradients
/// before touching any parameter.
pub fn sgd_step<'a, T: Real>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    lr: f64,
) -> Result<()> {
    if let Some(index) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    let lr = T::of(lr);
    let mut count = 0;
    for (p, g) in params.into_iter().zip(grads) {
        debug_assert_eq!(p.shape(), g.shape());
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv = *pv - lr * gv;
        }
        count += 1;
    }
    debug_assert_eq!(count, grads.len());
    Ok(())
}
