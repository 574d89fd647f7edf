use std::fmt::Write as _;
use std::path::Path;

use super::{MetricsReport, ReportRow};
use crate::error::{Error, Result};
use crate::imputer::PretrainEpoch;
use crate::store::write_atomic;

/// Externally reported AUROCs for the same model grid on two ICU datasets,
/// shipped with every report for side-by-side reading.
pub const REFERENCE_RESULTS: &str = include_str!("../../data/reference_results.csv");

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(&r).map_err(wrap)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn opt4(x: Option<f64>) -> String {
    x.map(f4).unwrap_or_else(|| "n/a".into())
}

fn model_parts(row: &ReportRow) -> (&str, &str) {
    row.model.split_once('/').unwrap_or((&row.model, ""))
}

/// Main table: one line per (model, policy) with validation and test AUROC
/// per strategy and their average.
pub fn report_csv(report: &MetricsReport) -> Result<Vec<u8>> {
    let mut header = vec!["dataset", "model", "input_strategy", "policy", "params"];
    let names: Vec<String> = report
        .strategies
        .iter()
        .flat_map(|s| [format!("{}_val_auroc", s.label()), format!("{}_test_auroc", s.label())])
        .collect();
    header.extend(names.iter().map(String::as_str));
    header.extend(["avg_val_auroc", "avg_test_auroc"]);
    let rows = report.rows.iter().map(|r| {
        let (head, strategy) = model_parts(r);
        let mut line = vec![
            r.dataset.clone(),
            head.to_string(),
            strategy.to_string(),
            r.policy.label().to_string(),
            r.params.to_string(),
        ];
        for c in &r.cells {
            line.push(f4(c.val_mean));
            line.push(f4(c.test_mean));
        }
        line.push(f4(r.avg_val));
        line.push(f4(r.avg_test));
        line
    });
    csv_bytes(&header, rows)
}

pub fn params_vs_auc_csv(report: &MetricsReport) -> Result<Vec<u8>> {
    let rows = report.rows.iter().map(|r| {
        vec![
            r.model.clone(),
            r.policy.label().to_string(),
            r.params.to_string(),
            f4(r.avg_val),
            f4(r.avg_test),
        ]
    });
    csv_bytes(&["model", "policy", "params", "avg_val_auroc", "avg_test_auroc"], rows)
}

pub fn report_markdown(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Transfer report: {}\n", report.dataset);
    let _ = writeln!(s, "{} folds, strategies: {}\n", report.folds, labels(report));

    s.push_str("## Imputation (held-out test cells)\n\n");
    s.push_str("| fold | checkpoint epoch | untrained MAE | MAE | RMSE | MRE |\n|---|---|---|---|---|---|\n");
    for f in &report.imputation {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            f.fold,
            f.checkpoint_epoch,
            f4(f.untrained_mae),
            f4(f.mae),
            f4(f.rmse),
            opt4(f.mre)
        );
    }

    s.push_str("\n## Downstream AUROC (mean over folds, validation / test)\n\n");
    s.push_str("| model | policy | params |");
    for st in &report.strategies {
        let _ = write!(s, " {} |", st.label());
    }
    s.push_str(" average |\n|---|---|---|");
    for _ in 0..=report.strategies.len() {
        s.push_str("---|");
    }
    s.push('\n');
    for r in &report.rows {
        let _ = write!(s, "| {} | {} | {} |", r.model, r.policy.label(), r.params);
        for c in &r.cells {
            let _ = write!(s, " {} / {} |", f4(c.val_mean), f4(c.test_mean));
        }
        let _ = writeln!(s, " {} / {} |", f4(r.avg_val), f4(r.avg_test));
    }

    s.push_str("\n## Per-fold test AUROC\n\n| model | policy | strategy | folds |\n|---|---|---|---|\n");
    for r in &report.rows {
        for c in &r.cells {
            let folds: Vec<String> = c.test_folds.iter().map(|&x| f4(x)).collect();
            let _ = writeln!(s, "| {} | {} | {} | {} |", r.model, r.policy.label(), c.strategy.label(), folds.join(", "));
        }
    }
    s.push_str("\nReference figures from other datasets are in `reference_results.csv`.\n");
    s
}

fn labels(report: &MetricsReport) -> String {
    report.strategies.iter().map(|s| s.label()).collect::<Vec<_>>().join(", ")
}

/// Writes every report artifact under `out_dir`. Output bytes depend only on
/// the report contents.
pub fn emit_report(report: &MetricsReport, out_dir: &Path) -> Result<()> {
    write_atomic(&out_dir.join("report.json"), &serde_json::to_vec_pretty(report)?)?;
    write_atomic(&out_dir.join("report.csv"), &report_csv(report)?)?;
    write_atomic(&out_dir.join("params_vs_auc.csv"), &params_vs_auc_csv(report)?)?;
    write_atomic(&out_dir.join("report.md"), report_markdown(report).as_bytes())?;
    write_atomic(&out_dir.join("reference_results.csv"), REFERENCE_RESULTS.as_bytes())?;
    for run in &report.runs {
        let name = format!("fold{}_{}_{}.jsonl", run.fold, run.plan.slug(), run.strategy.label());
        write_atomic(&out_dir.join("histories").join(&name), run.history.to_jsonl()?.as_bytes())?;
        if let Some(search) = &run.search {
            let mut body = String::new();
            for t in &search.trials {
                body.push_str(&serde_json::to_string(t)?);
                body.push('\n');
            }
            write_atomic(&out_dir.join("search").join(&name), body.as_bytes())?;
        }
    }
    Ok(())
}

/// Writes one pretraining history as JSON lines.
pub fn write_pretrain_history(history: &[PretrainEpoch], path: &Path) -> Result<()> {
    let mut body = String::new();
    for e in history {
        body.push_str(&serde_json::to_string(e)?);
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

/// Loads a report written by [`emit_report`].
pub fn read_report(path: &Path) -> Result<MetricsReport> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
