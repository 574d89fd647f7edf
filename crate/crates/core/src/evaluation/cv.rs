use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auroc, imputation_metrics};
use crate::classifiers::{assemble, forward_classify, FinetunePlan, PipelineModel, WeightPolicy};
use crate::config::RunConfig;
use crate::dataset::{kfold_split, prepare_fold, FoldSplit, PreparedFold, RawGrid};
use crate::error::{Error, Result};
use crate::imputer::{impute, init_params, pretrain, validation_metric, Checkpoint, ImputerConfig, ImputerOutput, PretrainEpoch};
use crate::rng::derive_seed;
use crate::training::{lr_search, LrStrategy, PipelineLearner, SearchOutcome, Session, TrainHistory, TrainerConfig};

/// One fine-tuning run: a plan under a rate strategy on one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fold: usize,
    pub plan: FinetunePlan,
    pub strategy: LrStrategy,
    pub params: usize,
    /// Rate chosen by the search, for `searched` runs.
    pub lr: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_auroc: f64,
    pub test_auroc: f64,
    pub history: TrainHistory,
    pub search: Option<SearchOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldImputation {
    pub fold: usize,
    pub checkpoint_epoch: usize,
    /// Held-out test MAE of the untrained imputer.
    pub untrained_mae: f64,
    pub mae: f64,
    pub rmse: f64,
    pub mre: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyCell {
    pub strategy: LrStrategy,
    pub val_folds: Vec<f64>,
    pub test_folds: Vec<f64>,
    pub val_mean: f64,
    pub test_mean: f64,
}

/// One model under one weight policy, summarized across folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    pub policy: WeightPolicy,
    pub params: usize,
    pub cells: Vec<StrategyCell>,
    /// Mean of the strategy columns.
    pub avg_val: f64,
    pub avg_test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub folds: usize,
    pub strategies: Vec<LrStrategy>,
    pub imputation: Vec<FoldImputation>,
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunRecord>,
}

impl MetricsReport {
    /// Mean validation AUROC over all runs under `policy`.
    pub fn mean_val_auroc(&self, policy: WeightPolicy) -> Option<f64> {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.plan.weight_policy == policy)
            .map(|r| r.val_auroc)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Result of a full cross-validation.
#[derive(Clone, Debug, PartialEq)]
pub struct CvOutput {
    pub report: MetricsReport,
    /// Imputer checkpoint per fold, in fold order.
    pub checkpoints: Vec<Checkpoint>,
    /// Pretraining history per fold; `None` where the checkpoint was loaded.
    pub pretrain_histories: Vec<Option<Vec<PretrainEpoch>>>,
}

/// Where per-fold imputer checkpoints come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointSource {
    /// Always pretrain.
    Pretrain,
    /// Load from the configured checkpoint paths; pretrain a missing one only
    /// when the config allows it.
    Load,
}

/// The imputer configuration used on `fold` of `grid`.
pub fn fold_imputer_config(cfg: &RunConfig, grid: &RawGrid, fold: usize) -> ImputerConfig {
    ImputerConfig {
        d_features: grid.n_features(),
        seed: derive_seed(cfg.seed, "imputer", fold as u64),
        ..cfg.imputer.clone()
    }
}

pub fn fold_splits(cfg: &RunConfig, grid: &RawGrid) -> Result<Vec<FoldSplit>> {
    kfold_split(grid.n_records(), cfg.folds, derive_seed(cfg.seed, "folds", 0))
}

/// Pretrains the imputer of one fold on its masked training view, selecting
/// on the masked validation view.
pub fn pretrain_fold(cfg: &RunConfig, grid: &RawGrid, fold: &PreparedFold) -> Result<(Checkpoint, Vec<PretrainEpoch>)> {
    let [train, val, _] = fold.masked(&cfg.mask, cfg.seed)?;
    let icfg = fold_imputer_config(cfg, grid, fold.fold_index);
    let out = pretrain(&train, &val, &icfg, &cfg.pretrain)?;
    let mut ck = out.checkpoint;
    ck.norm = Some(fold.stats.clone());
    ck.features = grid.features.clone();
    Ok((ck, out.history))
}

fn obtain_checkpoint(
    cfg: &RunConfig,
    grid: &RawGrid,
    fold: &PreparedFold,
    source: CheckpointSource,
) -> Result<(Checkpoint, Option<Vec<PretrainEpoch>>)> {
    let path = cfg.checkpoint_path(fold.fold_index);
    if source == CheckpointSource::Load {
        if path.exists() {
            let ck = Checkpoint::load(&path)?;
            let want = fold_imputer_config(cfg, grid, fold.fold_index);
            if ck.config != want || ck.features != grid.features {
                return Err(Error::Archive {
                    path,
                    message: "checkpoint was trained with a different imputer config or feature set".into(),
                });
            }
            return Ok((ck, None));
        }
        if !cfg.pretrain_missing {
            return Err(Error::MissingArtifact(path));
        }
    }
    let (ck, history) = pretrain_fold(cfg, grid, fold)?;
    Ok((ck, Some(history)))
}

/// Trainer settings of one run, with its own seed stream.
pub fn run_trainer_config(cfg: &RunConfig, plan: &FinetunePlan, strategy: LrStrategy, fold: usize) -> TrainerConfig {
    TrainerConfig {
        lr_strategy: strategy,
        seed: derive_seed(cfg.seed, &format!("trainer:{}:{}", plan.label(), strategy.label()), fold as u64),
        ..cfg.trainer.clone()
    }
}

pub fn head_seed(cfg: &RunConfig, plan: &FinetunePlan, fold: usize) -> u64 {
    derive_seed(cfg.seed, &format!("head:{}", plan.label()), fold as u64)
}

/// Searches a constant rate for `model` with successive halving.
pub fn search_lr(
    cfg: &RunConfig,
    model: &PipelineModel,
    fold: &PreparedFold,
    cache: Option<Arc<(ImputerOutput, ImputerOutput)>>,
) -> Result<SearchOutcome> {
    let tcfg = TrainerConfig {
        max_epochs: *cfg.search.rungs.last().expect("validated non-empty"),
        ..run_trainer_config(cfg, &model.plan, LrStrategy::Searched, fold.fold_index)
    };
    let seed = derive_seed(cfg.seed, &format!("search:{}", model.plan.label()), fold.fold_index as u64);
    lr_search(&cfg.search, seed, |_, lr| {
        let learner = PipelineLearner::with_cache(model.clone(), &fold.train, &fold.val, cache.clone());
        Session::new(learner, &tcfg, Some(lr))
    })
}

/// Fine-tunes one plan under one strategy and scores it on the test split.
pub fn run_one(
    cfg: &RunConfig,
    checkpoint: &Checkpoint,
    fold: &PreparedFold,
    plan: &FinetunePlan,
    strategy: LrStrategy,
    cache: Option<Arc<(ImputerOutput, ImputerOutput)>>,
) -> Result<(RunRecord, PipelineModel)> {
    let k = fold.fold_index;
    let model = assemble(checkpoint, plan, head_seed(cfg, plan, k))?;
    let params = model.param_count();
    let search = match strategy {
        LrStrategy::Searched => Some(search_lr(cfg, &model, fold, cache.clone())?),
        _ => None,
    };
    let lr = search.as_ref().map(|s| s.best_lr);
    let tcfg = run_trainer_config(cfg, plan, strategy, k);
    let learner = PipelineLearner::with_cache(model, &fold.train, &fold.val, cache);
    let mut session = Session::new(learner, &tcfg, lr)?;
    session.run()?;
    let (learner, history) = session.finish();
    let probs = forward_classify(&learner.model, &fold.test)?;
    let labels: Vec<f64> = fold.test.labels.data().iter().map(|&l| l as f64).collect();
    let test_auroc = auroc(&probs, &labels)?;
    log::info!(
        "fold {k} {} [{}]: val {:.4} test {test_auroc:.4} (best epoch {})",
        plan.label(),
        strategy.label(),
        history.best_val_auroc,
        history.best_epoch
    );
    Ok((
        RunRecord {
            fold: k,
            plan: plan.clone(),
            strategy,
            params,
            lr,
            best_epoch: history.best_epoch,
            epochs_run: history.epochs.len(),
            val_auroc: history.best_val_auroc,
            test_auroc,
            history,
            search,
        },
        learner.model,
    ))
}

struct FoldResult {
    checkpoint: Checkpoint,
    pretrain_history: Option<Vec<PretrainEpoch>>,
    imputation: FoldImputation,
    runs: Vec<RunRecord>,
}

fn run_fold(cfg: &RunConfig, grid: &RawGrid, split: &FoldSplit, source: CheckpointSource) -> Result<FoldResult> {
    let fold = prepare_fold(grid, split)?;
    let k = fold.fold_index;
    let (checkpoint, pretrain_history) = obtain_checkpoint(cfg, grid, &fold, source)?;
    let [_, _, masked_test] = fold.masked(&cfg.mask, cfg.seed)?;
    let untrained_mae = validation_metric(&init_params(&checkpoint.config)?, &checkpoint.config, &masked_test, 256)?;
    let out = impute(&checkpoint.params, &checkpoint.config, &masked_test, 256)?;
    let m = imputation_metrics(&out.imputed, &masked_test.ground_truth, &masked_test.eval_mask)?;
    let imputation = FoldImputation {
        fold: k,
        checkpoint_epoch: checkpoint.epoch,
        untrained_mae,
        mae: m.mae,
        rmse: m.rmse,
        mre: m.mre,
    };

    let cache = if cfg.plans.iter().any(|p| p.weight_policy == WeightPolicy::Frozen) {
        let probe = assemble(&checkpoint, &cfg.plans[0], 0)?;
        Some(Arc::new(PipelineLearner::imputer_pass(&probe, &fold.train, &fold.val)?))
    } else {
        None
    };
    let mut runs = Vec::with_capacity(cfg.plans.len() * cfg.strategies.len());
    for plan in &cfg.plans {
        for &strategy in &cfg.strategies {
            runs.push(run_one(cfg, &checkpoint, &fold, plan, strategy, cache.clone())?.0);
        }
    }
    Ok(FoldResult {
        checkpoint,
        pretrain_history,
        imputation,
        runs,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Groups runs into one row per (model, policy), sorted so the report does
/// not depend on plan order.
pub fn summarize(dataset: &str, folds: usize, strategies: &[LrStrategy], runs: &[RunRecord]) -> Vec<ReportRow> {
    let mut keys: Vec<(String, WeightPolicy)> = runs
        .iter()
        .map(|r| (r.plan.model_label(), r.plan.weight_policy))
        .collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(model, policy)| {
            let mine: Vec<&RunRecord> = runs
                .iter()
                .filter(|r| r.plan.model_label() == model && r.plan.weight_policy == policy)
                .collect();
            let cells: Vec<StrategyCell> = strategies
                .iter()
                .map(|&strategy| {
                    let mut of: Vec<&&RunRecord> = mine.iter().filter(|r| r.strategy == strategy).collect();
                    of.sort_by_key(|r| r.fold);
                    debug_assert_eq!(of.len(), folds);
                    let val_folds: Vec<f64> = of.iter().map(|r| r.val_auroc).collect();
                    let test_folds: Vec<f64> = of.iter().map(|r| r.test_auroc).collect();
                    StrategyCell {
                        strategy,
                        val_mean: mean(&val_folds),
                        test_mean: mean(&test_folds),
                        val_folds,
                        test_folds,
                    }
                })
                .collect();
            let avg_val = mean(&cells.iter().map(|c| c.val_mean).collect::<Vec<_>>());
            let avg_test = mean(&cells.iter().map(|c| c.test_mean).collect::<Vec<_>>());
            ReportRow {
                dataset: dataset.to_string(),
                params: mine[0].params,
                model,
                policy,
                cells,
                avg_val,
                avg_test,
            }
        })
        .collect()
}

/// Cross-validates every configured plan under every configured strategy.
/// Folds run concurrently up to `cfg.parallelism`; results are identical to
/// a sequential run.
pub fn run_cv(grid: &RawGrid, cfg: &RunConfig, source: CheckpointSource) -> Result<CvOutput> {
    cfg.validate()?;
    let splits = fold_splits(cfg, grid)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<FoldResult> = pool.install(|| {
        splits
            .par_iter()
            .map(|s| run_fold(cfg, grid, s, source))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut runs = Vec::new();
    let mut imputation = Vec::new();
    let mut checkpoints = Vec::new();
    let mut pretrain_histories = Vec::new();
    for r in results {
        pretrain_histories.push(r.pretrain_history);
        runs.extend(r.runs);
        imputation.push(r.imputation);
        checkpoints.push(r.checkpoint);
    }
    runs.sort_by(|a, b| {
        (a.fold, a.plan.label(), a.strategy).cmp(&(b.fold, b.plan.label(), b.strategy))
    });
    let rows = summarize(&cfg.data.name, cfg.folds, &cfg.strategies, &runs);
    Ok(CvOutput {
        report: MetricsReport {
            dataset: cfg.data.name.clone(),
            folds: cfg.folds,
            strategies: cfg.strategies.clone(),
            imputation,
            rows,
            runs,
        },
        checkpoints,
        pretrain_histories,
    })
}
