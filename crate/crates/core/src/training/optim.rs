//! Adam with coupled L2 weight decay and a reduce-on-plateau schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, allocated on the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState { cfg, ..Default::default() }
    }
}

/// One bias-corrected Adam update. Weight decay is added to the gradient
/// (`g + wd * theta`) before the moment updates.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut [f64]>,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    let params: Vec<&mut [f64]> = params.into_iter().collect();
    assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    let c1 = 1.0 - beta1.powf(state.t as f64);
    let c2 = 1.0 - beta2.powf(state.t as f64);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            let gi = g[i] + weight_decay * p[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Absolute improvement a loss must make to count as better.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { patience: 25, factor: 0.98, min_lr: 1e-7, threshold: 1e-8 }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve for `patience` consecutive epochs, then restarts the
/// count. The first observed loss always counts as an improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub cfg: PlateauConfig,
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, cfg: PlateauConfig) -> Self {
        PlateauScheduler { cfg, lr, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Records one epoch's loss and returns the learning rate for the next.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.cfg.threshold {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.patience {
                self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
