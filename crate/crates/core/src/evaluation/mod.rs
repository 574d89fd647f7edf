//! Metrics, the cross-validation driver and report emission.

mod cv;
mod metrics;
mod report;

pub use cv::{
    fold_imputer_config, fold_splits, head_seed, pretrain_fold, run_cv, run_one, run_trainer_config, search_lr,
    summarize, CheckpointSource, CvOutput, FoldImputation, MetricsReport, ReportRow, RunRecord, StrategyCell,
};
pub use metrics::{auroc, imputation_metrics, ImputationMetrics};
pub use report::{emit_report, params_vs_auc_csv, read_report, report_csv, report_markdown, write_pretrain_history, REFERENCE_RESULTS};
