use serde::{Deserialize, Serialize};

/// Reduce-on-plateau learning-rate schedule (minimisation, relative threshold).
///
/// A report counts as an improvement when `metric < best * (1 - threshold)`.
/// After more than `patience` consecutive non-improving reports the rate is
/// multiplied by `factor` (floored at `min_lr`) and the counter resets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub threshold: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64, min_lr: f64) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            patience,
            factor,
            min_lr,
            threshold: 1e-4,
        }
    }

    /// Feeds one epoch metric; returns the (possibly reduced) learning rate.
    pub fn update(&mut self, metric: f64) -> f64 {
        if metric < self.best * (1.0 - self.threshold) {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.bad_epochs = 0;
        }
        self.lr
    }
}

pub fn plateau_update(state: &mut PlateauScheduler, metric: f64) -> f64 {
    state.update(metric)
}
