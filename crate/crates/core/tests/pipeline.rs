//! Cross-validation and report behaviour on small synthetic data.

use std::path::Path;

use csai_transfer::classifiers::{
    assemble, read_feature_table, FeatureKind, FeatureTable, FinetunePlan, HeadKind, HeadSpec, InputStrategy,
    WeightPolicy,
};
use csai_transfer::config::RunConfig;
use csai_transfer::dataset::{bin_hourly, prepare_fold, synth_generate, RawGrid, SynthConfig};
use csai_transfer::evaluation::{emit_report, fold_splits, pretrain_fold, run_cv, CheckpointSource};
use csai_transfer::training::{LrStrategy, PipelineLearner, Session, StaticLearner, TrainerConfig};
use csai_transfer::Error;

fn grid(n: usize, seed: u64) -> RawGrid {
    let data = synth_generate(&SynthConfig {
        n_records: n,
        steps: 16,
        n_features: 3,
        missing_rate: 0.3,
        seed,
    })
    .unwrap();
    bin_hourly(&data.events, &data.labels, None, 16).unwrap()
}

fn tiny_config(folds: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 21;
    cfg.folds = folds;
    cfg.data.steps = 16;
    cfg.imputer.hidden = 6;
    cfg.imputer.embed_dim = 4;
    cfg.pretrain.epochs = 2;
    cfg.trainer.max_epochs = 3;
    cfg.trainer.batch_size = 32;
    cfg.search.n_trials = 2;
    cfg.search.rungs = vec![1, 2];
    cfg.plans = vec![FinetunePlan::new(HeadKind::Mlp2, WeightPolicy::Frozen, InputStrategy::HiddenStates)];
    cfg
}

#[test]
fn five_folds_one_plan_three_strategies_is_fifteen_runs() {
    let cfg = tiny_config(5);
    let out = run_cv(&grid(100, 1), &cfg, CheckpointSource::Pretrain).unwrap();
    assert_eq!(out.report.runs.len(), 15);
    assert_eq!(out.checkpoints.len(), 5);
    assert_eq!(out.report.rows.len(), 1);
    let row = &out.report.rows[0];
    assert_eq!(row.cells.len(), 3);
    let mean_val = row.cells.iter().map(|c| c.val_mean).sum::<f64>() / 3.0;
    let mean_test = row.cells.iter().map(|c| c.test_mean).sum::<f64>() / 3.0;
    assert!((row.avg_val - mean_val).abs() < 1e-12);
    assert!((row.avg_test - mean_test).abs() < 1e-12);
    for c in &row.cells {
        assert_eq!(c.test_folds.len(), 5);
    }
    let dir = tempfile::tempdir().unwrap();
    emit_report(&out.report, dir.path()).unwrap();
    let histories = std::fs::read_dir(dir.path().join("histories")).unwrap().count();
    assert_eq!(histories, 15);
    let searches = std::fs::read_dir(dir.path().join("search")).unwrap().count();
    assert_eq!(searches, 5);
}

#[test]
fn plan_order_does_not_change_metrics() {
    let g = grid(60, 2);
    let mut cfg = tiny_config(3);
    cfg.strategies = vec![LrStrategy::Cyclic, LrStrategy::Plateau];
    cfg.plans = vec![
        FinetunePlan::new(HeadKind::Mlp2, WeightPolicy::Frozen, InputStrategy::HiddenStates),
        FinetunePlan::new(HeadKind::Gru1, WeightPolicy::Frozen, InputStrategy::ImputedWithHiddenInit),
        FinetunePlan::new(HeadKind::Linear, WeightPolicy::Unfrozen, InputStrategy::HiddenStates),
    ];
    let a = run_cv(&g, &cfg, CheckpointSource::Pretrain).unwrap();
    cfg.plans.reverse();
    cfg.strategies.reverse();
    let b = run_cv(&g, &cfg, CheckpointSource::Pretrain).unwrap();
    assert_eq!(a.report.runs, b.report.runs);
    assert_eq!(a.report.imputation, b.report.imputation);
    for (x, y) in a.report.rows.iter().zip(&b.report.rows) {
        assert_eq!((&x.model, x.policy, x.params), (&y.model, y.policy, y.params));
        assert_eq!(x.avg_test, y.avg_test);
    }
}

#[test]
fn flipping_test_labels_leaves_training_untouched() {
    let g = grid(60, 3);
    let cfg = tiny_config(3);
    let split = fold_splits(&cfg, &g).unwrap()[0].clone();
    let mut poisoned = g.clone();
    for &r in &split.test {
        poisoned.labels[r] = 1 - poisoned.labels[r];
    }
    let a = run_cv(&g, &cfg, CheckpointSource::Pretrain).unwrap();
    let b = run_cv(&poisoned, &cfg, CheckpointSource::Pretrain).unwrap();
    assert_eq!(a.checkpoints[0].to_bytes().unwrap(), b.checkpoints[0].to_bytes().unwrap());
    let fold0 = |r: &csai_transfer::evaluation::MetricsReport| -> Vec<_> {
        r.runs.iter().filter(|x| x.fold == 0).map(|x| x.history.clone()).collect()
    };
    assert_eq!(fold0(&a.report), fold0(&b.report));
    let test0 = |r: &csai_transfer::evaluation::MetricsReport| -> Vec<f64> {
        r.runs.iter().filter(|x| x.fold == 0).map(|x| x.test_auroc).collect()
    };
    // the flip is visible only in the test score
    for (x, y) in test0(&a.report).iter().zip(test0(&b.report)) {
        assert!((x + y - 1.0).abs() < 1e-9, "{x} {y}");
    }
}

#[test]
fn missing_checkpoint_without_pretraining_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(3);
    cfg.output_dir = dir.path().to_path_buf();
    cfg.pretrain_missing = false;
    let err = run_cv(&grid(60, 4), &cfg, CheckpointSource::Load).unwrap_err();
    match err {
        Error::MissingArtifact(p) => assert!(p.ends_with("checkpoints/fold0.bin"), "{}", p.display()),
        e => panic!("unexpected {e}"),
    }
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn report_emission_is_deterministic_and_shaped() {
    let g = grid(60, 5);
    let mut cfg = tiny_config(3);
    cfg.strategies = vec![LrStrategy::Plateau];
    cfg.plans.push(FinetunePlan::new(HeadKind::Mlp2, WeightPolicy::Unfrozen, InputStrategy::HiddenStates));
    let out = run_cv(&g, &cfg, CheckpointSource::Pretrain).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&out.report, a.path()).unwrap();
    emit_report(&out.report, b.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));

    let csv = std::fs::read_to_string(a.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + out.report.rows.len());
    assert!(csv.starts_with("dataset,model,input_strategy,policy,params,plateau_val_auroc"));
    let pva = std::fs::read_to_string(a.path().join("params_vs_auc.csv")).unwrap();
    assert_eq!(pva.lines().next(), Some("model,policy,params,avg_val_auroc,avg_test_auroc"));
    let md = std::fs::read_to_string(a.path().join("report.md")).unwrap();
    assert!(md.contains("| MLP2/hidden_states | frozen |"));
    let back = csai_transfer::evaluation::read_report(&a.path().join("report.json")).unwrap();
    assert_eq!(back, out.report);
}

#[test]
fn static_linear_matches_frozen_linear_pipeline() {
    let g = grid(60, 6);
    let cfg = tiny_config(3);
    let split = &fold_splits(&cfg, &g).unwrap()[0];
    let fold = prepare_fold(&g, split).unwrap();
    let (ck, _) = pretrain_fold(&cfg, &g, &fold).unwrap();
    let tcfg = TrainerConfig {
        max_epochs: 6,
        lr_strategy: LrStrategy::Plateau,
        batch_size: 16,
        seed: 77,
        ..TrainerConfig::default()
    };

    let plan = FinetunePlan::new(HeadKind::Linear, WeightPolicy::Frozen, InputStrategy::HiddenStates);
    let model = assemble(&ck, &plan, 5).unwrap();
    let mut s = Session::new(PipelineLearner::new(model, &fold.train, &fold.val).unwrap(), &tcfg, None).unwrap();
    s.run().unwrap();
    let (pipe, pipe_hist) = s.finish();

    // through the exported CSV
    let dir = tempfile::tempdir().unwrap();
    let tables: Vec<FeatureTable> = [&fold.train, &fold.val]
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let p = dir.path().join(format!("{i}.csv"));
            csai_transfer::classifiers::export_features(&ck, b, FeatureKind::Hidden, &p).unwrap();
            read_feature_table(&p).unwrap()
        })
        .collect();
    let spec = HeadSpec::new(HeadKind::Linear, 2 * ck.config.hidden);
    let mut s = Session::new(StaticLearner::new(spec, 5, &tables[0], &tables[1]).unwrap(), &tcfg, None).unwrap();
    s.run().unwrap();
    let (stat, stat_hist) = s.finish();

    assert_eq!(pipe_hist, stat_hist);
    assert_eq!(pipe.model.head, stat.head);
}
