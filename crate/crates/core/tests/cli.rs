//! The binary end to end: exit codes, stage artifacts, stage splitting.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_csai-transfer");

const SUBCOMMANDS: [&str; 8] = [
    "ingest",
    "synth",
    "pretrain",
    "finetune",
    "search",
    "export-features",
    "evaluate",
    "report",
];

fn write_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "folds": 3,
        "data": {"steps": 16, "name": "synthetic"},
        "synth": {"n_records": 60, "n_features": 3, "missing_rate": 0.3},
        "imputer": {"hidden": 6, "embed_dim": 4},
        "pretrain": {"epochs": 2},
        "trainer": {"max_epochs": 3, "batch_size": 32},
        "search": {"n_trials": 2, "rungs": [1, 2]},
        "plans": [
            {"head": "mlp2", "weight_policy": "frozen", "input_strategy": "hidden_states"},
            {"head": "gru1", "weight_policy": "unfrozen", "input_strategy": "imputed_with_hidden_init"}
        ]
    });
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    p
}

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .env("CSAI_OUT_DIR", out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_exits_zero_everywhere() {
    assert_eq!(Command::new(BIN).arg("--help").output().unwrap().status.code(), Some(0));
    for sub in SUBCOMMANDS {
        let s = Command::new(BIN).args([sub, "--help"]).output().unwrap();
        assert_eq!(s.status.code(), Some(0), "{sub}");
        assert!(!s.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(Command::new(BIN).arg("bogus").output().unwrap().status.code(), Some(1));
    assert_eq!(Command::new(BIN).arg("finetune").output().unwrap().status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"trainer": {"early_stop_patience": -3}}"#).unwrap();
    let o = Command::new(BIN).arg("--config").arg(&bad).arg("synth").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trainer.early_stop_patience"));
}

#[test]
fn finetune_without_checkpoint_exits_two_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    ok(&run(&cfg, &out, &["synth"]));
    ok(&run(&cfg, &out, &["ingest"]));
    let o = run(&cfg, &out, &["finetune", "--policy", "frozen"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    let expected = out.join("checkpoints").join("fold0.bin");
    assert!(err.contains(&expected.display().to_string()), "{err}");
}

#[test]
fn stages_without_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    for args in [&["ingest"][..], &["pretrain"], &["evaluate"], &["report"]] {
        assert_eq!(run(&cfg, &out, args).status.code(), Some(2), "{args:?}");
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
fn staged_pipeline_matches_single_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let staged = dir.path().join("staged");
    let single = dir.path().join("single");

    for out in [&staged, &single] {
        ok(&run(&cfg, out, &["synth"]));
        ok(&run(&cfg, out, &["ingest"]));
    }
    ok(&run(&cfg, &staged, &["pretrain"]));
    ok(&run(&cfg, &staged, &["finetune", "--policy", "frozen"]));
    ok(&run(&cfg, &staged, &["evaluate"]));
    ok(&run(&cfg, &single, &["evaluate"]));

    for f in ["report.md", "report.csv", "report.json", "params_vs_auc.csv", "reference_results.csv"] {
        assert!(staged.join(f).exists(), "{f}");
    }
    assert!(staged.join("finetune/fold2_mlp2_hidden_states_frozen_plateau.bin").exists());

    // evaluate pretrains the missing folds itself; everything it shares
    // with the staged run must agree byte for byte
    let a: Vec<_> = tree(&staged)
        .into_iter()
        .filter(|(n, _)| !n.starts_with("finetune") && n != "effective_config.json")
        .collect();
    let b: Vec<_> = tree(&single).into_iter().filter(|(n, _)| n != "effective_config.json").collect();
    let names = |t: &[(String, Vec<u8>)]| t.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
    assert_eq!(names(&a), names(&b));
    for (x, y) in a.iter().zip(&b) {
        assert!(x.1 == y.1, "{} differs", x.0);
    }

    // frozen fine-tuning records the same runs evaluate reports
    let staged_run: serde_json::Value = serde_json::from_slice(
        &std::fs::read(staged.join("finetune/fold1_mlp2_hidden_states_frozen_cyclic.json")).unwrap(),
    )
    .unwrap();
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(staged.join("report.json")).unwrap()).unwrap();
    let same = report["runs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["fold"] == 1 && r["strategy"] == "cyclic" && r["plan"]["head"] == "mlp2")
        .unwrap();
    assert_eq!(&staged_run, same);
}

#[test]
fn remaining_stages_write_under_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    ok(&run(&cfg, &out, &["synth"]));
    ok(&run(&cfg, &out, &["ingest"]));
    ok(&run(&cfg, &out, &["pretrain", "--fold", "1"]));
    ok(&run(&cfg, &out, &["export-features", "--kind", "hidden", "--fold", "1"]));
    ok(&run(&cfg, &out, &["export-features", "--kind", "imputed", "--fold", "1"]));
    ok(&run(&cfg, &out, &["search", "--fold", "1"]));
    ok(&run(&cfg, &out, &["finetune", "--policy", "unfrozen", "--fold", "1", "--strategy", "plateau"]));
    assert_eq!(run(&cfg, &out, &["pretrain", "--fold", "7"]).status.code(), Some(1));

    let hidden = std::fs::read_to_string(out.join("features/fold1_test_hidden.csv")).unwrap();
    assert!(hidden.starts_with("record_id,f0,"));
    assert_eq!(hidden.lines().next().unwrap().split(',').count(), 2 + 12);
    let imputed = std::fs::read_to_string(out.join("features/fold1_train_imputed.csv")).unwrap();
    assert_eq!(imputed.lines().next().unwrap().split(',').count(), 2 + 16 * 3);
    assert!(out.join("search/fold1_gru1_imputed_with_hidden_init_unfrozen.json").exists());
    assert!(out.join("finetune/fold1_gru1_imputed_with_hidden_init_unfrozen_plateau.bin").exists());

    let echoed = std::fs::read_to_string(out.join("effective_config.json")).unwrap();
    let parsed = csai_transfer::config::RunConfig::from_json(&echoed).unwrap();
    assert_eq!(parsed.output_dir, out);
    // nothing escapes the output directory besides the config we wrote
    let mut top: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    top.sort();
    assert_eq!(top, ["config.json", "out"]);
}
