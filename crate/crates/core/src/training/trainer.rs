use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{adam_step, cyclic_lr, AdamState, EarlyStopping, LrStrategy, PlateauScheduler, StopDecision, TrainerConfig, Trial};
use crate::classifiers::{FeatureTable, HeadInput, HeadSpec, HeadVars, PipelineModel};
use crate::dataset::TimeSeriesBatch;
use crate::error::{Error, Result};
use crate::evaluation::auroc;
use crate::imputer::{impute, ImputerOutput};
use crate::numerics::{Array, Graph, ParamStore};
use crate::rng::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the training split holds a single class.
    pub train_auroc: Option<f64>,
    pub val_loss: f64,
    pub val_auroc: f64,
    /// Rate at the epoch's first iteration.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Rate used at every optimizer step, in order.
    pub lr_trace: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A model plus data that the generic loop can optimize.
pub trait Learner {
    type Snapshot;

    fn train_len(&self) -> usize;
    /// Mean cross-entropy and its gradients over `rows` of the training split.
    fn loss_and_grads(&self, rows: &[usize]) -> Result<(f64, BTreeMap<String, Array>)>;
    fn step(&mut self, grads: &BTreeMap<String, Array>, lr: f64) -> Result<()>;
    /// Logits and labels for a whole split.
    fn logits(&self, split: Split) -> Result<(Vec<f64>, Vec<f64>)>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, s: Self::Snapshot);
}

fn mean_bce(logits: &[f64], labels: &[f64]) -> f64 {
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    sum / logits.len() as f64
}

fn graph_loss(g: &mut Graph, logits: crate::numerics::Var, labels: &Array) -> Result<(f64, BTreeMap<String, Array>)> {
    let n = labels.len();
    let targets = labels.clone().reshape(vec![n, 1])?;
    let loss = g.bce_with_logits(logits, &targets)?;
    let value = g.value(loss).item() as f64;
    g.backward(loss)?;
    Ok((value, g.gradients()))
}

fn column(a: &Array) -> Vec<f64> {
    a.data().iter().map(|&v| v as f64).collect()
}

/// Fine-tuning of an assembled pipeline. Frozen pipelines reuse one imputer
/// pass over each split; unfrozen ones run the imputer on every batch.
pub struct PipelineLearner<'a> {
    pub model: PipelineModel,
    train: &'a TimeSeriesBatch,
    val: &'a TimeSeriesBatch,
    cache: Option<Arc<(ImputerOutput, ImputerOutput)>>,
    head_state: AdamState,
    imputer_state: AdamState,
}

impl<'a> PipelineLearner<'a> {
    pub fn new(model: PipelineModel, train: &'a TimeSeriesBatch, val: &'a TimeSeriesBatch) -> Result<Self> {
        let cache = if model.trains_imputer() {
            None
        } else {
            Some(Arc::new(Self::imputer_pass(&model, train, val)?))
        };
        Ok(Self::with_cache(model, train, val, cache))
    }

    /// Imputer outputs for both splits, shareable across learners built on
    /// the same frozen imputer.
    pub fn imputer_pass(model: &PipelineModel, train: &TimeSeriesBatch, val: &TimeSeriesBatch) -> Result<(ImputerOutput, ImputerOutput)> {
        Ok((
            impute(&model.imputer, &model.imputer_config, train, 256)?,
            impute(&model.imputer, &model.imputer_config, val, 256)?,
        ))
    }

    pub fn with_cache(
        model: PipelineModel,
        train: &'a TimeSeriesBatch,
        val: &'a TimeSeriesBatch,
        cache: Option<Arc<(ImputerOutput, ImputerOutput)>>,
    ) -> Self {
        let cache = if model.trains_imputer() { None } else { cache };
        Self {
            model,
            train,
            val,
            cache,
            head_state: AdamState::new(),
            imputer_state: AdamState::new(),
        }
    }
}

impl Learner for PipelineLearner<'_> {
    type Snapshot = (ParamStore, ParamStore);

    fn train_len(&self) -> usize {
        self.train.n_records()
    }

    fn loss_and_grads(&self, rows: &[usize]) -> Result<(f64, BTreeMap<String, Array>)> {
        let sub = self.train.subset(rows);
        let cached = self.cache.as_ref().map(|c| c.0.select(rows));
        let mut g = Graph::new();
        let logits = self.model.logits(&mut g, &sub, cached.as_ref(), true)?;
        graph_loss(&mut g, logits, &sub.labels)
    }

    fn step(&mut self, grads: &BTreeMap<String, Array>, lr: f64) -> Result<()> {
        let (head, imputer): (BTreeMap<_, _>, BTreeMap<_, _>) =
            grads.iter().map(|(k, v)| (k.clone(), v.clone())).partition(|(k, _)| k.starts_with("head."));
        adam_step(&mut self.model.head, &head, &mut self.head_state, lr)?;
        if self.model.trains_imputer() {
            adam_step(&mut self.model.imputer, &imputer, &mut self.imputer_state, lr)?;
        }
        Ok(())
    }

    fn logits(&self, split: Split) -> Result<(Vec<f64>, Vec<f64>)> {
        let batch = match split {
            Split::Train => self.train,
            Split::Val => self.val,
        };
        let fresh;
        let out = match (&self.cache, split) {
            (Some(c), Split::Train) => &c.0,
            (Some(c), Split::Val) => &c.1,
            (None, _) => {
                fresh = impute(&self.model.imputer, &self.model.imputer_config, batch, 256)?;
                &fresh
            }
        };
        let mut g = Graph::new();
        let z = self.model.logits(&mut g, batch, Some(out), false)?;
        Ok((column(g.value(z)), column(&batch.labels)))
    }

    fn snapshot(&self) -> Self::Snapshot {
        let imputer = if self.model.trains_imputer() {
            self.model.imputer.clone()
        } else {
            ParamStore::new()
        };
        (self.model.head.clone(), imputer)
    }

    fn restore(&mut self, s: Self::Snapshot) {
        self.model.head = s.0;
        if self.model.trains_imputer() {
            self.model.imputer = s.1;
        }
    }
}

/// A feed-forward head trained on a static feature table.
pub struct StaticLearner<'a> {
    pub spec: HeadSpec,
    pub head: ParamStore,
    train: &'a FeatureTable,
    val: &'a FeatureTable,
    state: AdamState,
}

impl<'a> StaticLearner<'a> {
    pub fn new(spec: HeadSpec, seed: u64, train: &'a FeatureTable, val: &'a FeatureTable) -> Result<Self> {
        if spec.kind.is_recurrent() {
            return Err(Error::invalid("static features need a feed-forward head"));
        }
        if train.features.cols() != spec.input_dim || val.features.cols() != spec.input_dim {
            return Err(Error::invalid(format!(
                "feature tables have {} / {} columns, head expects {}",
                train.features.cols(),
                val.features.cols(),
                spec.input_dim
            )));
        }
        Ok(Self {
            head: crate::classifiers::build_head(&spec, seed)?,
            spec,
            train,
            val,
            state: AdamState::new(),
        })
    }

    fn forward(&self, g: &mut Graph, x: Array, train: bool) -> Result<crate::numerics::Var> {
        let input = HeadInput::Static(g.constant(x));
        let head = HeadVars::load(g, &self.head, &self.spec, train)?;
        head.forward(g, &input)
    }
}

impl Learner for StaticLearner<'_> {
    type Snapshot = ParamStore;

    fn train_len(&self) -> usize {
        self.train.record_ids.len()
    }

    fn loss_and_grads(&self, rows: &[usize]) -> Result<(f64, BTreeMap<String, Array>)> {
        let mut g = Graph::new();
        let z = self.forward(&mut g, self.train.features.select_rows(rows), true)?;
        graph_loss(&mut g, z, &self.train.labels.select_rows(rows))
    }

    fn step(&mut self, grads: &BTreeMap<String, Array>, lr: f64) -> Result<()> {
        adam_step(&mut self.head, grads, &mut self.state, lr)
    }

    fn logits(&self, split: Split) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = match split {
            Split::Train => self.train,
            Split::Val => self.val,
        };
        let mut g = Graph::new();
        let z = self.forward(&mut g, t.features.clone(), false)?;
        Ok((column(g.value(z)), column(&t.labels)))
    }

    fn snapshot(&self) -> ParamStore {
        self.head.clone()
    }

    fn restore(&mut self, s: ParamStore) {
        self.head = s;
    }
}

/// Resumable training loop: mini-batch Adam on cross-entropy, the configured
/// rate schedule, early stopping on validation AUROC and best-epoch retention.
pub struct Session<L: Learner> {
    pub learner: L,
    cfg: TrainerConfig,
    fixed_lr: f64,
    step_size: usize,
    plateau: PlateauScheduler,
    stop: EarlyStopping,
    best: Option<L::Snapshot>,
    history: TrainHistory,
    iteration: usize,
    finished: bool,
}

impl<L: Learner> Session<L> {
    /// `fixed_lr` is the rate for the `searched` strategy; the configured
    /// `fixed_lr` is used when absent.
    pub fn new(learner: L, cfg: &TrainerConfig, fixed_lr: Option<f64>) -> Result<Self> {
        cfg.validate()?;
        if learner.train_len() == 0 {
            return Err(Error::invalid("empty training split"));
        }
        let per_epoch = learner.train_len().div_ceil(cfg.batch_size);
        Ok(Self {
            learner,
            fixed_lr: fixed_lr.unwrap_or(cfg.fixed_lr),
            step_size: cfg.step_size.unwrap_or(4 * per_epoch),
            plateau: PlateauScheduler::new(cfg.plateau.clone()),
            stop: EarlyStopping::new(cfg.early_stop_patience),
            cfg: cfg.clone(),
            best: None,
            history: TrainHistory {
                epochs: Vec::new(),
                lr_trace: Vec::new(),
                best_epoch: 0,
                best_val_auroc: f64::NAN,
                stopped_early: false,
            },
            iteration: 0,
            finished: false,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.epochs.len()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    fn lr(&self) -> f64 {
        match self.cfg.lr_strategy {
            LrStrategy::Cyclic => cyclic_lr(self.iteration, self.cfg.base_lr, self.cfg.max_lr, self.step_size, self.cfg.gamma),
            LrStrategy::Plateau => self.plateau.lr(),
            LrStrategy::Searched => self.fixed_lr,
        }
    }

    /// Runs one epoch unless training has already finished.
    pub fn run_epoch(&mut self) -> Result<Option<&EpochRecord>> {
        if self.finished {
            return Ok(None);
        }
        let epoch = self.epochs_done() + 1;
        let last_finite = epoch.checked_sub(1).filter(|&e| e > 0);
        let mut order: Vec<usize> = (0..self.learner.train_len()).collect();
        order.shuffle(&mut rng_from(derive_seed(self.cfg.seed, "finetune-shuffle", epoch as u64)));
        let first_lr = self.lr();
        for (b, rows) in order.chunks(self.cfg.batch_size).enumerate() {
            let diverged = |what: &str| Error::Diverged {
                at: format!("epoch {epoch}, batch {b}: {what}"),
                last_finite_epoch: last_finite,
            };
            let (loss, grads) = match self.learner.loss_and_grads(rows) {
                Err(Error::NonFinite(what)) => return Err(diverged(&what)),
                r => r?,
            };
            if !loss.is_finite() {
                return Err(diverged("loss"));
            }
            let lr = self.lr();
            match self.learner.step(&grads, lr) {
                Err(Error::NonFinite(what)) => return Err(diverged(&what)),
                r => r?,
            }
            self.history.lr_trace.push(lr);
            self.iteration += 1;
        }
        let (tz, ty) = self.learner.logits(Split::Train)?;
        let (vz, vy) = self.learner.logits(Split::Val)?;
        let val_loss = mean_bce(&vz, &vy);
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                at: format!("epoch {epoch}, validation loss"),
                last_finite_epoch: last_finite,
            });
        }
        let val_auroc = auroc(&vz, &vy)?;
        let record = EpochRecord {
            epoch,
            train_loss: mean_bce(&tz, &ty),
            train_auroc: auroc(&tz, &ty).ok(),
            val_loss,
            val_auroc,
            lr: first_lr,
        };
        if self.cfg.lr_strategy == LrStrategy::Plateau {
            self.plateau.step(val_loss);
        }
        let decision = self.stop.update(epoch, val_auroc);
        if self.stop.improved() {
            self.best = Some(self.learner.snapshot());
            self.history.best_epoch = epoch;
            self.history.best_val_auroc = val_auroc;
        }
        if decision == StopDecision::Stop {
            self.finished = true;
            self.history.stopped_early = true;
        } else if epoch >= self.cfg.max_epochs {
            self.finished = true;
        }
        self.history.epochs.push(record);
        Ok(self.history.epochs.last())
    }

    /// Trains to completion.
    pub fn run(&mut self) -> Result<()> {
        while self.run_epoch()?.is_some() {}
        Ok(())
    }

    /// Restores the best epoch's parameters and returns the learner.
    pub fn finish(mut self) -> (L, TrainHistory) {
        if let Some(best) = self.best.take() {
            self.learner.restore(best);
        }
        (self.learner, self.history)
    }
}

impl<L: Learner> Trial for Session<L> {
    fn advance_to(&mut self, epoch: usize) -> Result<f64> {
        while self.epochs_done() < epoch && self.run_epoch()?.is_some() {}
        Ok(self.history.epochs.last().map_or(f64::INFINITY, |e| e.val_loss))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: PipelineModel,
    pub history: TrainHistory,
}

/// Fine-tunes `model` on `train`, selecting on `val`.
pub fn train(
    model: PipelineModel,
    train: &TimeSeriesBatch,
    val: &TimeSeriesBatch,
    cfg: &TrainerConfig,
    fixed_lr: Option<f64>,
) -> Result<TrainOutcome> {
    let mut s = Session::new(PipelineLearner::new(model, train, val)?, cfg, fixed_lr)?;
    s.run()?;
    let (learner, history) = s.finish();
    Ok(TrainOutcome {
        model: learner.model,
        history,
    })
}
