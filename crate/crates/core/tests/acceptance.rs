//! Acceptance criteria, one test per criterion. Each prints a single
//! `[criterion N] ... PASS|FAIL` line with the measured values.
//!
//! Run with `cargo test -p csai-transfer --test acceptance -- --nocapture`
//! to see the lines.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use csai_transfer::classifiers::{
    build_head, FinetunePlan, HeadInput, HeadKind, HeadSpec, HeadVars, HiddenDirections, InputStrategy, WeightPolicy,
};
use csai_transfer::config::RunConfig;
use csai_transfer::dataset::{bin_hourly, prepare_fold, synth_generate, RawGrid, SynthConfig, TimeSeriesBatch};
use csai_transfer::evaluation::{
    auroc, emit_report, fold_splits, pretrain_fold, run_cv, run_one, CheckpointSource,
};
use csai_transfer::imputer::{build_forward, impute, init_params, validation_metric, Checkpoint, ImputerConfig};
use csai_transfer::masking::{apply_nonuniform_mask, MaskPlan, WeightMode};
use csai_transfer::numerics::{grad_check_params, Array, Graph, ParamStore};
use csai_transfer::training::{
    cyclic_lr, EarlyStopping, LrStrategy, PipelineLearner, PlateauConfig, PlateauScheduler, StopDecision, TrainerConfig,
};
use csai_transfer::Error;

// Tolerances and thresholds.
const SCHEDULE_TOL: f64 = 1e-12;
const GRAD_REL_ERR_MAX: f64 = 1e-3;
/// Central-difference step in f64. Smaller steps drown gradients of order
/// 1e-8 in rounding noise of the loss.
const FD_STEP: f64 = 1e-5;
const MAE_REDUCTION_MIN: f64 = 0.30;
const UNFROZEN_TEST_AUROC_MIN: f64 = 0.95;
const E2E_MAX_EPOCHS: usize = 100;

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    println!("[criterion {n}] {name} ... {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, t: usize, d: usize, observed: f64) -> TimeSeriesBatch {
    let mask = Array::from_fn(&[n, t, d], |_| if rng.random::<f64>() < observed { 1.0 } else { 0.0 });
    let values = Array::from_fn(&[n, t, d], |i| if mask[i] > 0.0 { rng.random::<f32>() * 4.0 - 2.0 } else { 0.0 });
    let labels = Array::from_fn(&[n], |i| (i % 2) as f32);
    TimeSeriesBatch::new((0..n).map(|i| format!("r{i}")).collect(), values, mask, labels).unwrap()
}

fn synthetic_grid(n_records: usize, n_features: usize, seed: u64) -> RawGrid {
    let data = synth_generate(&SynthConfig {
        n_records,
        steps: 48,
        n_features,
        missing_rate: 0.4,
        seed,
    })
    .unwrap();
    bin_hourly(&data.events, &data.labels, None, 48).unwrap()
}

#[test]
fn criterion_01_parameter_counts() {
    let start = Instant::now();
    let imp = ImputerConfig::default();
    let mlp2 = HeadSpec::new(HeadKind::Mlp2, imp.hidden).head_param_count();
    let lstm = FinetunePlan::new(HeadKind::Lstm1, WeightPolicy::Frozen, InputStrategy::ImputedWithHiddenInit)
        .head_spec(&imp)
        .unwrap()
        .head_param_count();
    let gru = FinetunePlan::new(HeadKind::Gru1, WeightPolicy::Frozen, InputStrategy::ImputedWithHiddenInit)
        .head_spec(&imp)
        .unwrap()
        .head_param_count();
    let fwd_plan = FinetunePlan {
        hidden_directions: HiddenDirections::Forward,
        ..FinetunePlan::new(HeadKind::Mlp2, WeightPolicy::Frozen, InputStrategy::HiddenStates)
    };
    let mlp2_fwd = fwd_plan.head_spec(&imp).unwrap().head_param_count();
    // instantiated stores agree with the closed forms
    let built = build_head(&HeadSpec::new(HeadKind::Mlp2, 108), 0).unwrap().total_size();
    let elapsed = start.elapsed();
    let ok = (imp.d_features + 1, imp.hidden) == (36, 108)
        && mlp2 == 14_081
        && lstm == 76_721
        && gru == 61_061
        && mlp2_fwd == 14_081
        && built == 14_081
        && within(elapsed, Duration::from_secs(1));
    verdict(
        1,
        "parameter-count exactness",
        ok,
        &format!("MLP2 {mlp2}, LSTM1 {lstm}, GRU1 {gru}, MLP2 fwd-plan {mlp2_fwd}, built {built}; {elapsed:?}"),
    );
}

#[test]
fn criterion_02_scheduler_traces() {
    let mut s = PlateauScheduler::new(PlateauConfig::default());
    let mut distinct = vec![s.lr()];
    let mut trace = Vec::new();
    for _ in 0..100 {
        let lr = s.step(1.0);
        trace.push(lr);
        if (lr - *distinct.last().unwrap()).abs() > 0.0 {
            distinct.push(lr);
        }
    }
    let expect = [1e-3, 2e-4, 4e-5, 1e-5];
    let plateau_ok = distinct.len() == expect.len()
        && distinct.iter().zip(expect).all(|(a, b)| (a - b).abs() <= SCHEDULE_TOL)
        && (trace.last().unwrap() - 1e-5).abs() <= SCHEDULE_TOL;

    let step_size = 37;
    let cyc: Vec<f64> = (0..10 * step_size).map(|i| cyclic_lr(i, 1e-5, 1e-3, step_size, 1.0)).collect();
    let in_range = cyc.iter().all(|&v| (1e-5 - SCHEDULE_TOL..=1e-3 + SCHEDULE_TOL).contains(&v));
    let peak = cyc
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let cyclic_ok = in_range
        && peak.0 == step_size
        && (peak.1 - 1e-3).abs() <= SCHEDULE_TOL
        && (cyc[0] - 1e-5).abs() <= SCHEDULE_TOL;
    verdict(
        2,
        "scheduler traces",
        plateau_ok && cyclic_ok,
        &format!("plateau levels {distinct:?}; cyclic peak {:.3e} at {} (step_size {step_size}), in range {in_range}", peak.1, peak.0),
    );
}

#[test]
fn criterion_03_early_stopping() {
    let mut es = EarlyStopping::new(25);
    let mut stopped = None;
    for epoch in 1..=200 {
        // rises to epoch 10 then decays
        let v = 0.9 - 0.002 * (epoch as f64 - 10.0).abs();
        if es.update(epoch, v) == StopDecision::Stop {
            stopped = Some(epoch);
            break;
        }
    }
    let ok = stopped == Some(35) && es.best_epoch() == Some(10);
    verdict(
        3,
        "early stopping",
        ok,
        &format!("stopped after epoch {stopped:?}, best epoch {:?}", es.best_epoch()),
    );
}

#[test]
fn criterion_04_masking_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    let mut failures = Vec::new();
    for case in 0..200 {
        let (n, t, d) = (rng.random_range(1..6), rng.random_range(2..20), rng.random_range(1..7));
        let observed = rng.random_range(0.2..1.0);
        let b = random_batch(&mut rng, n, t, d, observed);
        let observed = b.observed_count();
        if observed < 10 {
            continue;
        }
        let weights = match case % 3 {
            0 => WeightMode::InverseMissingRate,
            1 => WeightMode::Uniform,
            _ => WeightMode::Explicit((0..d).map(|j| 1.0 + j as f64).collect()),
        };
        let plan = MaskPlan {
            rate: 0.10,
            weights,
            seed: rng.random(),
        };
        let m = apply_nonuniform_mask(&b, &plan).unwrap();
        let again = apply_nonuniform_mask(&b, &plan).unwrap();
        let hidden = m.eval_mask.data().iter().filter(|&&e| e > 0.0).count();
        // floor(0.10 * observed) in integers
        let budget = observed / 10;
        let subset = (0..b.mask.len()).all(|i| m.eval_mask[i] == 0.0 || b.mask[i] == 1.0);
        if hidden != budget || !subset || m != again {
            failures.push(format!("case {case}: {hidden} hidden of {observed}"));
        }
        checked += 1;
    }
    verdict(
        4,
        "masking budget",
        failures.is_empty() && checked > 150,
        &format!("{checked} batches, failures {failures:?}"),
    );
}

fn toy_imputer() -> ImputerConfig {
    ImputerConfig {
        d_features: 3,
        hidden: 4,
        embed_dim: 4,
        attention_heads: 2,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn criterion_05_gradient_correctness() {
    let start = Instant::now();
    let cfg = toy_imputer();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random_batch(&mut rng, 3, 4, 3, 0.7);
    let batch = apply_nonuniform_mask(&batch, &MaskPlan { rate: 0.2, ..Default::default() }).unwrap();
    let imputer = init_params(&cfg).unwrap();
    let mut worst: Vec<(String, f64)> = Vec::new();

    // imputer alone: decay gates, regressions, fusion, cells, attention
    let p64 = imputer.cast::<f64>();
    let report = grad_check_params::<f64, Error, _>(
        |g, p, tr| Ok(build_forward(g, p, &cfg, &batch, tr)?.loss_total),
        &p64,
        FD_STEP,
    )
    .unwrap();
    worst.extend(report.into_iter().map(|(n, e)| (format!("imputer:{n}"), e)));

    // each head on top of a trainable imputer, through the classification loss
    let targets = batch.labels.cast::<f64>().reshape(vec![3, 1]).unwrap();
    let heads = [
        (HeadKind::Mlp2, InputStrategy::HiddenStates),
        (HeadKind::Mlp5, InputStrategy::HiddenStates),
        (HeadKind::Linear, InputStrategy::HiddenStates),
        (HeadKind::Lstm1, InputStrategy::ImputedWithHiddenInit),
        (HeadKind::Gru1, InputStrategy::ImputedWithHiddenInit),
    ];
    for (kind, strategy) in heads {
        let plan = FinetunePlan {
            hidden_width: 8,
            ..FinetunePlan::new(kind, WeightPolicy::Unfrozen, strategy)
        };
        let spec = plan.head_spec(&cfg).unwrap();
        let mut all: ParamStore = imputer.clone();
        for (name, a) in build_head(&spec, 9).unwrap().iter() {
            all.insert(name.clone(), a.clone());
        }
        let all = all.cast::<f64>();
        let report = grad_check_params::<f64, Error, _>(
            |g: &mut Graph<f64>, p, tr| {
                let out = build_forward(g, p, &cfg, &batch, tr)?;
                let input = match strategy {
                    InputStrategy::HiddenStates => HeadInput::Static(g.concat_cols(&[out.last_fwd, out.last_bwd])?),
                    _ => {
                        // imputed step plus the t/steps hour channel
                        let mut steps = Vec::new();
                        for (t, &x) in out.imputed.iter().enumerate() {
                            let hour = g.constant(Array::full(&[3, 1], t as f64 / 4.0));
                            steps.push(g.concat_cols(&[x, hour])?);
                        }
                        HeadInput::Sequence { steps, h0: out.last_fwd }
                    }
                };
                let head = HeadVars::load(g, p, &spec, tr)?;
                let logits = head.forward(g, &input)?;
                Ok(g.bce_with_logits(logits, &targets)?)
            },
            &all,
            FD_STEP,
        )
        .unwrap();
        worst.extend(report.into_iter().map(|(n, e)| (format!("{}:{n}", kind.label()), e)));
    }
    let elapsed = start.elapsed();
    let (name, max) = worst
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    verdict(
        5,
        "gradient correctness",
        max < GRAD_REL_ERR_MAX && within(elapsed, Duration::from_secs(60)),
        &format!("{} blocks, worst rel error {max:.2e} at {name}; {elapsed:?}", worst.len()),
    );
}

fn pair_count_auroc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

#[test]
fn criterion_06_auroc_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut instances = 0;
    while instances < 100 {
        let n = rng.random_range(2..=200);
        // a few distinct levels force ties
        let levels = rng.random_range(2..12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        if !labels.contains(&1.0) || !labels.contains(&0.0) {
            continue;
        }
        instances += 1;
        if auroc(&scores, &labels).unwrap() != pair_count_auroc(&scores, &labels) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        6,
        "AUROC oracle equivalence",
        mismatches == 0 && within(elapsed, Duration::from_secs(10)),
        &format!("{instances} instances, {mismatches} mismatches; {elapsed:?}"),
    );
}

#[test]
fn criterion_07_observed_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0usize;
    let mut cells = 0usize;
    for case in 0..1000u64 {
        let (n, t, d) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..5));
        let cfg = ImputerConfig {
            d_features: d,
            hidden: rng.random_range(1..6),
            embed_dim: 2 * rng.random_range(1..3),
            attention_heads: rng.random_range(1..3),
            use_attention: case % 4 != 0,
            seed: case,
            ..Default::default()
        };
        let mut params = init_params(&cfg).unwrap();
        let scale = rng.random_range(0.5f32..3.0);
        for (_, a) in params.iter_mut() {
            for v in a.data_mut() {
                *v *= scale;
            }
        }
        let observed = rng.random_range(0.1..1.0);
        let b = random_batch(&mut rng, n, t, d, observed);
        let out = impute(&params, &cfg, &b, 2).unwrap();
        for i in 0..b.mask.len() {
            if b.mask[i] == 1.0 {
                cells += 1;
                if out.imputed[i] != b.values[i] {
                    violations += 1;
                }
            }
        }
    }
    verdict(
        7,
        "observed-cell identity",
        violations == 0 && cells > 0,
        &format!("1000 batches, {cells} observed cells, {violations} altered"),
    );
}

fn e2e_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 8;
    cfg.imputer.hidden = 32;
    cfg.imputer.embed_dim = 16;
    cfg.pretrain.epochs = 40;
    cfg.pretrain.batch_size = 32;
    cfg.pretrain.lr = 3e-3;
    cfg.trainer = TrainerConfig {
        max_epochs: E2E_MAX_EPOCHS,
        ..TrainerConfig::default()
    };
    cfg
}

#[test]
fn criterion_08_end_to_end_synthetic() {
    let start = Instant::now();
    let cfg = e2e_config();
    let grid = synthetic_grid(500, 8, 8);
    let split = &fold_splits(&cfg, &grid).unwrap()[0];
    let fold = prepare_fold(&grid, split).unwrap();

    let (ck, _) = pretrain_fold(&cfg, &grid, &fold).unwrap();
    let [_, _, masked_test] = fold.masked(&cfg.mask, cfg.seed).unwrap();
    let untrained = validation_metric(&init_params(&ck.config).unwrap(), &ck.config, &masked_test, 256).unwrap();
    let trained = validation_metric(&ck.params, &ck.config, &masked_test, 256).unwrap();
    let reduction = 1.0 - trained / untrained;

    let unfrozen = FinetunePlan::new(HeadKind::Mlp2, WeightPolicy::Unfrozen, InputStrategy::HiddenStates);
    let (run, _) = run_one(&cfg, &ck, &fold, &unfrozen, LrStrategy::Plateau, None).unwrap();

    // frozen fine-tuning from the stored checkpoint must not touch it
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fold0.bin");
    ck.save(&path).unwrap();
    let before = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let frozen = FinetunePlan::new(HeadKind::Mlp2, WeightPolicy::Frozen, InputStrategy::HiddenStates);
    let probe = csai_transfer::classifiers::assemble(&loaded, &frozen, 0).unwrap();
    let cache = std::sync::Arc::new(PipelineLearner::imputer_pass(&probe, &fold.train, &fold.val).unwrap());
    let (frozen_run, frozen_model) = run_one(&cfg, &loaded, &fold, &frozen, LrStrategy::Cyclic, Some(cache)).unwrap();
    let after_training = Checkpoint {
        params: frozen_model.imputer.clone(),
        ..loaded.clone()
    }
    .to_bytes()
    .unwrap();
    let unchanged = std::fs::read(&path).unwrap() == before && after_training == before;
    let elapsed = start.elapsed();

    let ok = reduction >= MAE_REDUCTION_MIN
        && run.test_auroc >= UNFROZEN_TEST_AUROC_MIN
        && run.epochs_run <= E2E_MAX_EPOCHS
        && unchanged
        && within(elapsed, Duration::from_secs(600));
    verdict(
        8,
        "end-to-end synthetic pipeline",
        ok,
        &format!(
            "held-out MAE {untrained:.4} -> {trained:.4} ({:.1}% lower); unfrozen MLP2 test AUROC {:.4} after {} epochs (best {}); frozen test AUROC {:.4}, checkpoint bytes unchanged {unchanged}; {elapsed:?}",
            100.0 * reduction,
            run.test_auroc,
            run.epochs_run,
            run.best_epoch,
            frozen_run.test_auroc
        ),
    );
}

#[test]
fn criterion_09_unfrozen_vs_frozen() {
    let mut cfg = e2e_config();
    cfg.seed = 9;
    cfg.pretrain.epochs = 20;
    cfg.trainer.max_epochs = 40;
    cfg.strategies = vec![LrStrategy::Plateau];
    cfg.plans = vec![
        FinetunePlan::new(HeadKind::Mlp2, WeightPolicy::Frozen, InputStrategy::HiddenStates),
        FinetunePlan::new(HeadKind::Mlp2, WeightPolicy::Unfrozen, InputStrategy::HiddenStates),
    ];
    let grid = synthetic_grid(500, 8, 9);
    let report = run_cv(&grid, &cfg, CheckpointSource::Pretrain).unwrap().report;
    let frozen = report.mean_val_auroc(WeightPolicy::Frozen).unwrap();
    let unfrozen = report.mean_val_auroc(WeightPolicy::Unfrozen).unwrap();
    let detail = format!(
        "mean val AUROC over {} folds: unfrozen {unfrozen:.4}, frozen {frozen:.4}",
        report.folds
    );
    // empirical direction only: a violation is reported, not failed
    if unfrozen >= frozen {
        println!("[criterion 9] unfrozen >= frozen on validation ... PASS ({detail})");
    } else {
        println!("[criterion 9] unfrozen >= frozen on validation ... WARN soft-fail ({detail})");
    }
}

fn small_cv_config(out: &std::path::Path, parallelism: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 10;
    cfg.folds = 3;
    cfg.parallelism = parallelism;
    cfg.output_dir = out.to_path_buf();
    cfg.imputer.hidden = 8;
    cfg.imputer.embed_dim = 4;
    cfg.pretrain.epochs = 3;
    cfg.trainer.max_epochs = 4;
    cfg.trainer.batch_size = 32;
    cfg.search.n_trials = 3;
    cfg.search.rungs = vec![1, 2];
    cfg.plans = vec![
        FinetunePlan::new(HeadKind::Mlp2, WeightPolicy::Frozen, InputStrategy::HiddenStates),
        FinetunePlan::new(HeadKind::Gru1, WeightPolicy::Unfrozen, InputStrategy::ImputedWithHiddenInit),
    ];
    cfg
}

fn tree_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_10_reproducibility() {
    let grid = synthetic_grid(120, 4, 10);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut trees = Vec::new();
    for (dir, threads) in dirs.iter().zip([1, 2]) {
        let cfg = small_cv_config(dir.path(), threads);
        let out = run_cv(&grid, &cfg, CheckpointSource::Pretrain).unwrap();
        emit_report(&out.report, dir.path()).unwrap();
        for (k, ck) in out.checkpoints.iter().enumerate() {
            ck.save(&cfg.checkpoint_path(k)).unwrap();
        }
        trees.push(tree_bytes(dir.path()));
    }
    let names: Vec<&String> = trees[0].iter().map(|(n, _)| n).collect();
    let differing: Vec<&String> = trees[0]
        .iter()
        .zip(&trees[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| &a.0)
        .collect();
    let ok = trees[0].len() == trees[1].len() && differing.is_empty() && names.iter().any(|n| n.ends_with(".bin"));
    verdict(
        10,
        "reproducibility",
        ok,
        &format!("{} files compared (1 vs 2 threads), differing {differing:?}", names.len()),
    );
}
