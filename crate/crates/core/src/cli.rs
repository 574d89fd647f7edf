//! Command-line stages. Each stage reads its inputs from the output directory
//! and writes its artifacts there, so stages can run in separate processes.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::classifiers::{assemble, export_features, FeatureKind, WeightPolicy};
use crate::config::{parse_config, RunConfig};
use crate::dataset::{bin_hourly, prepare_fold, read_events, read_labels, synth_generate, write_events, write_labels, RawGrid, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    emit_report, fold_imputer_config, fold_splits, pretrain_fold, read_report, run_cv, run_one, search_lr,
    write_pretrain_history, CheckpointSource,
};
use crate::imputer::{impute, Checkpoint, ImputerOutput};
use crate::rng::derive_seed;
use crate::store::write_atomic;
use crate::training::LrStrategy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "csai-transfer", version, about = "Pretrain a bidirectional recurrent imputer and fine-tune classifiers on it")]
struct Cli {
    /// JSON run configuration; documented defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic event/label dataset under <out>/data.
    Synth,
    /// Bin events into hourly grids and store them under <out>/prepared.
    Ingest,
    /// Pretrain the imputer on every fold (or one) and store checkpoints.
    Pretrain {
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Fine-tune the configured plans of one weight policy on stored checkpoints.
    Finetune {
        #[arg(long, value_enum)]
        policy: PolicyArg,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Run the learning-rate search alone for every configured plan.
    Search {
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Write static imputed or hidden-state features per split to CSV.
    ExportFeatures {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Full cross-validation; writes the report and histories.
    Evaluate,
    /// Re-render report tables from <out>/report.json.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Frozen,
    Unfrozen,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Searched,
    Cyclic,
    Plateau,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Imputed,
    Hidden,
}

impl From<PolicyArg> for WeightPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Frozen => WeightPolicy::Frozen,
            PolicyArg::Unfrozen => WeightPolicy::Unfrozen,
        }
    }
}

impl From<StrategyArg> for LrStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Searched => LrStrategy::Searched,
            StrategyArg::Cyclic => LrStrategy::Cyclic,
            StrategyArg::Plateau => LrStrategy::Plateau,
        }
    }
}

impl From<KindArg> for FeatureKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Imputed => FeatureKind::Imputed,
            KindArg::Hidden => FeatureKind::Hidden,
        }
    }
}

/// Parses `args` (program name first), runs the stage and returns the exit
/// code: 0 on success, 1 on usage or config errors, 2 on runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli.command, &cfg) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    write_atomic(&cfg.out("effective_config.json"), cfg.to_json()?.as_bytes())?;
    match *cmd {
        Command::Synth => synth(cfg),
        Command::Ingest => ingest(cfg).map(|_| ()),
        Command::Pretrain { fold } => pretrain_stage(cfg, fold),
        Command::Finetune { policy, fold, strategy } => finetune_stage(cfg, policy.into(), fold, strategy.map(Into::into)),
        Command::Search { fold } => search_stage(cfg, fold),
        Command::ExportFeatures { kind, fold } => export_stage(cfg, kind.into(), fold),
        Command::Evaluate => evaluate_stage(cfg),
        Command::Report => {
            let report = read_report(&cfg.out("report.json"))?;
            emit_report(&report, &cfg.output_dir)
        }
    }
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let data = synth_generate(&SynthConfig {
        n_records: cfg.synth.n_records,
        steps: cfg.data.steps,
        n_features: cfg.synth.n_features,
        missing_rate: cfg.synth.missing_rate,
        seed: derive_seed(cfg.seed, "synth", 0),
    })?;
    write_events(&cfg.out("data/events.csv"), &data.events)?;
    write_labels(&cfg.out("data/labels.csv"), &data.labels)?;
    let info = serde_json::json!({
        "features": data.info.features,
        "feature_missing_rates": data.info.feature_missing_rates,
        "label_weights": data.info.label_weights,
        "positive_rate": data.labels.iter().filter(|(_, l)| *l == 1).count() as f64 / data.labels.len() as f64,
    });
    write_atomic(&cfg.out("data/synth_info.json"), &serde_json::to_vec_pretty(&info)?)?;
    log::info!("wrote {} events for {} records", data.events.len(), data.labels.len());
    Ok(())
}

/// Bins the configured event and label files into the stored grid.
pub fn ingest(cfg: &RunConfig) -> Result<RawGrid> {
    let events_path = cfg.events_path();
    let labels_path = cfg.labels_path();
    for p in [&events_path, &labels_path] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let events = read_events(&events_path)?;
    let labels = read_labels(&labels_path)?;
    let grid = bin_hourly(&events, &labels, cfg.data.vocabulary.as_deref(), cfg.data.steps)?;
    grid.save(&cfg.grid_path())?;
    log::info!(
        "grid: {} records, {} features, {} steps",
        grid.n_records(),
        grid.n_features(),
        grid.steps
    );
    Ok(grid)
}

fn selected_folds(cfg: &RunConfig, fold: Option<usize>) -> Result<Vec<usize>> {
    match fold {
        Some(k) if k >= cfg.folds => Err(Error::Config {
            key: "--fold".into(),
            constraint: format!("must be below folds = {}", cfg.folds),
        }),
        Some(k) => Ok(vec![k]),
        None => Ok((0..cfg.folds).collect()),
    }
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

fn pretrain_stage(cfg: &RunConfig, fold: Option<usize>) -> Result<()> {
    let grid = RawGrid::load(&cfg.grid_path())?;
    let splits = fold_splits(cfg, &grid)?;
    let folds = selected_folds(cfg, fold)?;
    pool(cfg)?.install(|| {
        folds.par_iter().try_for_each(|&k| {
            let prepared = prepare_fold(&grid, &splits[k])?;
            let (ck, history) = pretrain_fold(cfg, &grid, &prepared)?;
            ck.save(&cfg.checkpoint_path(k))?;
            write_pretrain_history(&history, &cfg.out(format!("histories/fold{k}_pretrain.jsonl")))?;
            log::info!("fold {k}: checkpoint epoch {} val {:?}", ck.epoch, ck.val_metric);
            Ok(())
        })
    })
}

/// Loads the stored checkpoint of fold `k` and checks it matches the config.
fn stored_checkpoint(cfg: &RunConfig, grid: &RawGrid, k: usize) -> Result<Checkpoint> {
    let path = cfg.checkpoint_path(k);
    let ck = Checkpoint::load(&path)?;
    if ck.config != fold_imputer_config(cfg, grid, k) || ck.features != grid.features {
        return Err(Error::Archive {
            path,
            message: "checkpoint was trained with a different imputer config or feature set".into(),
        });
    }
    Ok(ck)
}

fn frozen_cache(
    ck: &Checkpoint,
    fold: &crate::dataset::PreparedFold,
) -> Result<std::sync::Arc<(ImputerOutput, ImputerOutput)>> {
    Ok(std::sync::Arc::new((
        impute(&ck.params, &ck.config, &fold.train, 256)?,
        impute(&ck.params, &ck.config, &fold.val, 256)?,
    )))
}

fn finetune_stage(cfg: &RunConfig, policy: WeightPolicy, fold: Option<usize>, strategy: Option<LrStrategy>) -> Result<()> {
    let grid = RawGrid::load(&cfg.grid_path())?;
    let splits = fold_splits(cfg, &grid)?;
    let folds = selected_folds(cfg, fold)?;
    let plans: Vec<_> = cfg.plans.iter().filter(|p| p.weight_policy == policy).cloned().collect();
    if plans.is_empty() {
        return Err(Error::Config {
            key: "plans".into(),
            constraint: format!("no plan uses the {} policy", policy.label()),
        });
    }
    let strategies = strategy.map(|s| vec![s]).unwrap_or_else(|| cfg.strategies.clone());
    // every checkpoint must exist before any training starts
    let checkpoints = folds
        .iter()
        .map(|&k| stored_checkpoint(cfg, &grid, k))
        .collect::<Result<Vec<_>>>()?;
    pool(cfg)?.install(|| {
        folds.par_iter().zip(checkpoints.par_iter()).try_for_each(|(&k, ck)| {
            let prepared = prepare_fold(&grid, &splits[k])?;
            let cache = match policy {
                WeightPolicy::Frozen => Some(frozen_cache(ck, &prepared)?),
                WeightPolicy::Unfrozen => None,
            };
            for plan in &plans {
                for &s in &strategies {
                    let (record, model) = run_one(cfg, ck, &prepared, plan, s, cache.clone())?;
                    let stem = format!("fold{k}_{}_{}", plan.slug(), s.label());
                    model.save(&cfg.out(format!("finetune/{stem}.bin")))?;
                    write_atomic(&cfg.out(format!("finetune/{stem}.json")), &serde_json::to_vec_pretty(&record)?)?;
                    write_atomic(
                        &cfg.out(format!("histories/{stem}.jsonl")),
                        record.history.to_jsonl()?.as_bytes(),
                    )?;
                }
            }
            Ok(())
        })
    })
}

fn search_stage(cfg: &RunConfig, fold: Option<usize>) -> Result<()> {
    let grid = RawGrid::load(&cfg.grid_path())?;
    let splits = fold_splits(cfg, &grid)?;
    let folds = selected_folds(cfg, fold)?;
    let checkpoints = folds
        .iter()
        .map(|&k| stored_checkpoint(cfg, &grid, k))
        .collect::<Result<Vec<_>>>()?;
    pool(cfg)?.install(|| {
        folds.par_iter().zip(checkpoints.par_iter()).try_for_each(|(&k, ck)| {
            let prepared = prepare_fold(&grid, &splits[k])?;
            let cache = frozen_cache(ck, &prepared)?;
            for plan in &cfg.plans {
                let model = assemble(ck, plan, crate::evaluation::head_seed(cfg, plan, k))?;
                let shared = (!model.trains_imputer()).then(|| cache.clone());
                let outcome = search_lr(cfg, &model, &prepared, shared)?;
                log::info!("fold {k} {}: best lr {:.3e}", plan.label(), outcome.best_lr);
                write_atomic(
                    &cfg.out(format!("search/fold{k}_{}.json", plan.slug())),
                    &serde_json::to_vec_pretty(&outcome)?,
                )?;
            }
            Ok(())
        })
    })
}

fn export_stage(cfg: &RunConfig, kind: FeatureKind, fold: Option<usize>) -> Result<()> {
    let grid = RawGrid::load(&cfg.grid_path())?;
    let splits = fold_splits(cfg, &grid)?;
    let name = match kind {
        FeatureKind::Imputed => "imputed",
        FeatureKind::Hidden => "hidden",
    };
    for k in selected_folds(cfg, fold)? {
        let ck = stored_checkpoint(cfg, &grid, k)?;
        let prepared = prepare_fold(&grid, &splits[k])?;
        for (split, batch) in [("train", &prepared.train), ("val", &prepared.val), ("test", &prepared.test)] {
            export_features(&ck, batch, kind, &cfg.out(format!("features/fold{k}_{split}_{name}.csv")))?;
        }
    }
    Ok(())
}

fn evaluate_stage(cfg: &RunConfig) -> Result<()> {
    let grid = RawGrid::load(&cfg.grid_path())?;
    let out = run_cv(&grid, cfg, CheckpointSource::Load)?;
    for (k, (ck, history)) in out.checkpoints.iter().zip(&out.pretrain_histories).enumerate() {
        if let Some(h) = history {
            ck.save(&cfg.checkpoint_path(k))?;
            write_pretrain_history(h, &cfg.out(format!("histories/fold{k}_pretrain.jsonl")))?;
        }
    }
    emit_report(&out.report, &cfg.output_dir)?;
    for row in &out.report.rows {
        log::info!(
            "{} [{}]: avg val {:.4} test {:.4}",
            row.model,
            row.policy.label(),
            row.avg_val,
            row.avg_test
        );
    }
    Ok(())
}
