//! Run configuration: one JSON document, unknown keys rejected, every field
//! defaulted.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifiers::{FinetunePlan, HeadKind, InputStrategy, WeightPolicy};
use crate::error::{Error, Result};
use crate::imputer::{ImputerConfig, PretrainConfig};
use crate::masking::MaskPlan;
use crate::training::{LrStrategy, SearchSpec, TrainerConfig};

pub const ENV_OUT_DIR: &str = "CSAI_OUT_DIR";
pub const ENV_PARALLELISM: &str = "CSAI_PARALLELISM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Events CSV; `<output_dir>/data/events.csv` when absent.
    pub events: Option<PathBuf>,
    /// Labels CSV; `<output_dir>/data/labels.csv` when absent.
    pub labels: Option<PathBuf>,
    /// Feature order; sorted names of all features seen when absent.
    pub vocabulary: Option<Vec<String>>,
    pub steps: usize,
    /// Dataset name shown in reports.
    pub name: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            events: None,
            labels: None,
            vocabulary: None,
            steps: crate::dataset::STEPS,
            name: "dataset".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub n_records: usize,
    pub n_features: usize,
    pub missing_rate: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            n_records: 500,
            n_features: 8,
            missing_rate: 0.4,
        }
    }
}

/// Frozen and unfrozen variants of MLP2, MLP5, LSTM1 and GRU1.
pub fn default_plans() -> Vec<FinetunePlan> {
    let mut plans = Vec::new();
    for policy in [WeightPolicy::Frozen, WeightPolicy::Unfrozen] {
        plans.push(FinetunePlan::new(HeadKind::Mlp2, policy, InputStrategy::HiddenStates));
        plans.push(FinetunePlan::new(HeadKind::Mlp5, policy, InputStrategy::HiddenStates));
        plans.push(FinetunePlan::new(HeadKind::Lstm1, policy, InputStrategy::ImputedWithHiddenInit));
        plans.push(FinetunePlan::new(HeadKind::Gru1, policy, InputStrategy::ImputedWithHiddenInit));
    }
    plans
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthSettings,
    /// `d_features` is taken from the data; `seed` is derived per fold.
    pub imputer: ImputerConfig,
    pub pretrain: PretrainConfig,
    pub mask: MaskPlan,
    /// `seed` is derived per run.
    pub trainer: TrainerConfig,
    pub search: SearchSpec,
    pub plans: Vec<FinetunePlan>,
    pub strategies: Vec<LrStrategy>,
    pub folds: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Folds processed concurrently.
    pub parallelism: usize,
    /// Pretrain folds whose checkpoint is missing instead of failing.
    pub pretrain_missing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synth: SynthSettings::default(),
            imputer: ImputerConfig::default(),
            pretrain: PretrainConfig::default(),
            mask: MaskPlan::default(),
            trainer: TrainerConfig::default(),
            search: SearchSpec::default(),
            plans: default_plans(),
            strategies: LrStrategy::ALL.to_vec(),
            folds: 5,
            output_dir: PathBuf::from("out"),
            seed: 0,
            parallelism: 1,
            pretrain_missing: true,
        }
    }
}

fn config_err(key: &str, constraint: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        constraint: constraint.into(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            config_err(if key == "." { "<root>" } else { &key }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.imputer.validate()?;
        self.pretrain.validate()?;
        self.mask
            .validate()
            .map_err(|e| config_err("mask", e.to_string()))?;
        self.trainer.validate()?;
        self.search.validate()?;
        if self.data.steps == 0 {
            return Err(config_err("data.steps", "must be positive"));
        }
        if self.plans.is_empty() {
            return Err(config_err("plans", "must not be empty"));
        }
        for (i, p) in self.plans.iter().enumerate() {
            p.validate().map_err(|e| config_err(&format!("plans[{i}]"), e.to_string()))?;
        }
        let mut labels: Vec<String> = self.plans.iter().map(FinetunePlan::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err("plans", "duplicate plan"));
        }
        if self.strategies.is_empty() {
            return Err(config_err("strategies", "must not be empty"));
        }
        let mut s = self.strategies.clone();
        s.sort();
        s.dedup();
        if s.len() != self.strategies.len() {
            return Err(config_err("strategies", "duplicate strategy"));
        }
        if self.folds < 3 {
            return Err(config_err("folds", "must be at least 3"));
        }
        if self.parallelism == 0 {
            return Err(config_err("parallelism", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.synth.missing_rate) {
            return Err(config_err("synth.missing_rate", "must be in [0, 1)"));
        }
        if self.synth.n_features < 2 || self.synth.n_records < self.folds {
            return Err(config_err("synth", "need n_features >= 2 and n_records >= folds"));
        }
        Ok(())
    }

    /// Applies the output-directory and parallelism environment overrides.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(dir) = get(ENV_OUT_DIR).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Some(p) = get(ENV_PARALLELISM).filter(|p| !p.is_empty()) {
            self.parallelism = p
                .trim()
                .parse()
                .ok()
                .filter(|&n: &usize| n >= 1)
                .ok_or_else(|| config_err(ENV_PARALLELISM, format!("expected a positive integer, got `{p}`")))?;
        }
        Ok(())
    }

    pub fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.output_dir.join(rel)
    }

    pub fn events_path(&self) -> PathBuf {
        self.data.events.clone().unwrap_or_else(|| self.out("data/events.csv"))
    }

    pub fn labels_path(&self) -> PathBuf {
        self.data.labels.clone().unwrap_or_else(|| self.out("data/labels.csv"))
    }

    pub fn grid_path(&self) -> PathBuf {
        self.out("prepared/grid.bin")
    }

    pub fn checkpoint_path(&self, fold: usize) -> PathBuf {
        self.out(format!("checkpoints/fold{fold}.bin"))
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text)
}
