//! Optimizer, learning-rate schedules, early stopping, the pruned
//! learning-rate search and the fine-tuning loop.

mod optim;
mod schedule;
mod search;
mod trainer;

pub use optim::{adam_step, AdamState};
pub use schedule::{cyclic_lr, EarlyStopping, PlateauConfig, PlateauScheduler, StopDecision};
pub use search::{lr_search, SearchOutcome, SearchSpec, Trial, TrialRecord};
pub use trainer::{train, EpochRecord, Learner, PipelineLearner, Session, Split, StaticLearner, TrainHistory, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrStrategy {
    /// Constant rate chosen by [`lr_search`].
    Searched,
    Cyclic,
    Plateau,
}

impl LrStrategy {
    pub const ALL: [LrStrategy; 3] = [LrStrategy::Searched, LrStrategy::Cyclic, LrStrategy::Plateau];

    pub fn label(self) -> &'static str {
        match self {
            LrStrategy::Searched => "searched",
            LrStrategy::Cyclic => "cyclic",
            LrStrategy::Plateau => "plateau",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_strategy: LrStrategy,
    pub base_lr: f64,
    pub max_lr: f64,
    pub gamma: f64,
    /// Half-cycle length in iterations; four epochs' worth when absent.
    pub step_size: Option<usize>,
    pub plateau: PlateauConfig,
    pub early_stop_patience: usize,
    /// Rate used by `searched` when no search result is supplied.
    pub fixed_lr: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 64,
            lr_strategy: LrStrategy::Cyclic,
            base_lr: 1e-5,
            max_lr: 1e-3,
            gamma: 0.9999,
            step_size: None,
            plateau: PlateauConfig::default(),
            early_stop_patience: 25,
            fixed_lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, constraint: &str| {
            Err(Error::Config {
                key: format!("trainer.{key}"),
                constraint: constraint.into(),
            })
        };
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr && self.max_lr.is_finite()) {
            return bad("base_lr", "need 0 < base_lr <= max_lr");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must be in (0, 1]");
        }
        if self.step_size == Some(0) {
            return bad("step_size", "must be at least 1");
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) {
            return bad("plateau.factor", "must be in (0, 1)");
        }
        if p.patience == 0 {
            return bad("plateau.patience", "must be at least 1");
        }
        if !(p.min_lr > 0.0 && p.min_lr <= p.initial) {
            return bad("plateau.min_lr", "need 0 < min_lr <= initial");
        }
        if !(p.threshold >= 0.0) {
            return bad("plateau.threshold", "must be >= 0");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience", "must be at least 1");
        }
        if !(self.fixed_lr > 0.0 && self.fixed_lr.is_finite()) {
            return bad("fixed_lr", "must be positive");
        }
        Ok(())
    }
}
