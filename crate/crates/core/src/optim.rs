//! AdamW with decoupled weight decay, and a reduce-on-plateau learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One AdamW update. Weight decay applies only to tensors of rank ≥ 2
/// (matrices and embedding tables); gains and biases are not decayed.
pub fn adamw_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            op: "adamw_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::Dimension {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
    }
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if p.shape().len() >= 2 {
            c.lr * c.weight_decay
        } else {
            0.0
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= decay * *w;
            *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Reduce-on-plateau state: the learning rate drops by `factor` once the
/// monitored loss has failed to improve on its best value by more than
/// `min_delta` for `patience` consecutive epochs. After a drop, `cooldown`
/// epochs pass before bad epochs are counted again.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub cooldown: usize,
    pub best: f64,
    pub bad_epochs: usize,
    pub cooldown_left: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Parameter(format!("plateau factor {factor} outside (0, 1)")));
        }
        if patience == 0 {
            return Err(Error::Parameter("plateau patience must be ≥ 1".into()));
        }
        Ok(Self {
            lr,
            factor,
            patience,
            min_delta: 1e-4,
            cooldown: 1,
            best: f64::INFINITY,
            bad_epochs: 0,
            cooldown_left: 0,
        })
    }

    /// Feeds one epoch's validation loss; returns the learning rate to use
    /// from now on.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.cooldown_left > 0 {
            self.cooldown_left -= 1;
            self.bad_epochs = 0;
        }
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            self.cooldown_left = self.cooldown;
        }
        self.lr
    }
}

/// Replays a validation-loss history through `state` and returns the final
/// learning rate.
pub fn reduce_lr_on_plateau(history: &[f64], state: &mut PlateauScheduler) -> f64 {
    for &l in history {
        state.observe(l);
    }
    state.lr
}
