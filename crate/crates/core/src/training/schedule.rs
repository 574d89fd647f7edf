use serde::{Deserialize, Serialize};

/// Triangular cyclic rate whose amplitude decays by `gamma` per iteration.
pub fn cyclic_lr(iteration: usize, base_lr: f64, max_lr: f64, step_size: usize, gamma: f64) -> f64 {
    let step = step_size.max(1) as f64;
    let it = iteration as f64;
    let cycle = (1.0 + it / (2.0 * step)).floor();
    let x = (it / step - 2.0 * cycle + 1.0).abs();
    base_lr + (max_lr - base_lr) * (1.0 - x).max(0.0) * gamma.powf(it)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub initial: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Absolute improvement a loss must make to reset the patience counter.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            factor: 0.2,
            patience: 15,
            min_lr: 1e-5,
            threshold: 1e-4,
        }
    }
}

/// Reduce-on-plateau for a minimized quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig) -> Self {
        Self {
            lr: cfg.initial,
            cfg,
            best: None,
            bad: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's loss and returns the rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(b) if !(loss < b - self.cfg.threshold) => self.bad += 1,
            _ => {
                self.best = Some(loss);
                self.bad = 0;
            }
        }
        if self.bad >= self.cfg.patience {
            self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
            self.bad = 0;
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based stopping on a maximized metric. Ties do not count as
/// improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: None,
            bad: 0,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best.map(|b| b.1)
    }

    /// Whether the last update set a new best.
    pub fn improved(&self) -> bool {
        self.best.is_some() && self.bad == 0
    }

    pub fn update(&mut self, epoch: usize, value: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if !(value > b) => self.bad += 1,
            _ => {
                self.best = Some((epoch, value));
                self.bad = 0;
            }
        }
        if self.bad >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}
