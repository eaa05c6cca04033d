//! SGD with momentum and weight decay, and the reduce-on-plateau schedule.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl OptimizerConfig {
    /// Rotation pretraining and the probes trained on its features.
    pub fn rotnet() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-6,
            batch_size: 128,
        }
    }

    /// Bag-of-words reconstruction.
    pub fn bownet() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// SGD in the common formulation:
/// `g = grad + wd * p; buf = momentum * buf + g; p -= lr * buf`,
/// with the buffer initialized to the first `g`.
pub struct Sgd {
    vars: Vec<(String, Var)>,
    buffers: Vec<Option<Tensor>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<(String, Var)>, cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let buffers = vec![None; vars.len()];
        Ok(Self {
            vars,
            buffers,
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for ((_, var), buf) in self.vars.iter().zip(self.buffers.iter_mut()) {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g = (g + (var.as_tensor() * self.weight_decay)?)?;
            }
            if self.momentum != 0.0 {
                g = match buf.take() {
                    Some(b) => ((b * self.momentum)? + g)?,
                    None => g,
                };
                *buf = Some(g.clone());
            }
            if self.lr != 0.0 {
                var.set(&(var.as_tensor() - (g * self.lr)?)?)?;
            }
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    /// Momentum buffers keyed by parameter name.
    pub fn state(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .zip(&self.buffers)
            .filter_map(|((name, _), b)| b.as_ref().map(|b| (name.clone(), b.clone())))
            .collect()
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor>) -> Result<()> {
        for ((name, var), buf) in self.vars.iter().zip(self.buffers.iter_mut()) {
            *buf = match state.get(name) {
                Some(t) if t.dims() == var.dims() => Some(t.clone()),
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "momentum buffer `{name}` has shape {:?}, expected {:?}",
                        t.dims(),
                        var.dims()
                    )))
                }
                None => None,
            };
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    /// Relative improvement required to reset the counter.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 10,
            factor: 0.1,
            threshold: 1e-4,
            min_lr: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedulerState {
    pub config: PlateauConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub epochs_since_improvement: usize,
    pub reductions: usize,
}

impl PlateauSchedulerState {
    pub fn new(initial_lr: f64, config: PlateauConfig) -> Self {
        Self {
            config,
            lr: initial_lr,
            best: None,
            epochs_since_improvement: 0,
            reductions: 0,
        }
    }

    /// Records one epoch's monitored loss and returns the learning rate for
    /// the next epoch. When the counter reaches `patience` the rate is scaled
    /// by `factor` (never below `min_lr`) and the counter restarts.
    pub fn step(&mut self, loss: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("monitored loss {loss}")));
        }
        let improved = match self.best {
            None => true,
            Some(best) => loss < best - best.abs() * self.config.threshold,
        };
        if improved {
            self.best = Some(loss);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        if self.epochs_since_improvement >= self.config.patience {
            let reduced = (self.lr * self.config.factor).max(self.config.min_lr);
            if reduced < self.lr {
                self.reductions += 1;
            }
            self.lr = reduced;
            self.epochs_since_improvement = 0;
        }
        Ok(self.lr)
    }
}

/// Functional form of [`PlateauSchedulerState::step`].
pub fn plateau_step(mut state: PlateauSchedulerState, loss: f64) -> Result<(PlateauSchedulerState, f64)> {
    let lr = state.step(loss)?;
    Ok((state, lr))
}
