use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use longiseg::infer::segment_subject;
use longiseg::metrics::{
    evaluate, reports_csv, summarize, MetricReport, MetricSummary, MetricValues,
};
use serde::{Deserialize, Serialize};

use super::{in_run_dir, load_dataset, load_predictor, normalized};
use crate::config::load_train_file;
use crate::error::{io_error, runtime, CliError, Result};
use crate::manifest::{absolute, RunManifest};
use crate::EvaluateArgs;

pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const REPORTS_DIR: &str = "reports";
/// Aggregate CSV of one evaluated checkpoint inside its report directory.
pub const METRICS_CSV: &str = "metrics.csv";

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    /// Model variant, or the stub kind.
    pub kind: String,
    pub source: PathBuf,
    pub summary: MetricSummary,
}

/// Per-subject report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject: String,
    pub label: String,
    pub threshold: f64,
    pub report: MetricReport,
}

/// Rows sorted by mean Overall Score, best first; ties keep input order.
pub fn rank(mut rows: Vec<ComparisonRow>) -> Vec<ComparisonRow> {
    rows.sort_by(|a, b| b.summary.mean.overall.total_cmp(&a.summary.mean.overall));
    rows
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "rank,label,kind,n_subjects,{}\n",
        MetricValues::NAMES.join(",")
    );
    for (i, r) in rows.iter().enumerate() {
        let values: Vec<String> = r
            .summary
            .mean
            .as_array()
            .iter()
            .map(|v| v.to_string())
            .collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            i + 1,
            r.label,
            r.kind,
            r.summary.n_subjects,
            values.join(",")
        );
    }
    out
}

/// Fixed-width table with the Overall Score as the leading metric column.
pub fn comparison_table(rows: &[ComparisonRow], split: &str) -> String {
    let width = rows
        .iter()
        .map(|r| r.label.len())
        .chain([6])
        .max()
        .unwrap_or(6);
    let mut out = format!(
        "Method comparison on the {split} split (mean over subjects, sorted by Overall Score)\n\n{:<4} {:<width$} {:>8} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "rank", "method", "overall", "dsc", "ppv", "ltpr", "lfpr", "vd"
    );
    for (i, r) in rows.iter().enumerate() {
        let m = &r.summary.mean;
        let _ = writeln!(
            out,
            "{:<4} {:<width$} {:>8.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            i + 1,
            r.label,
            m.overall,
            m.dsc,
            m.ppv,
            m.ltpr,
            m.lfpr,
            m.vd
        );
    }
    out
}

fn safe_label(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Row labels: explicit ones first, then the checkpoint kind, made unique.
fn labels(explicit: &[String], kinds: &[String]) -> Result<Vec<String>> {
    if explicit.len() > kinds.len() {
        return Err(CliError::config(format!(
            "{} labels given for {} checkpoints",
            explicit.len(),
            kinds.len()
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(kinds.len());
    for (i, kind) in kinds.iter().enumerate() {
        let base = safe_label(explicit.get(i).unwrap_or(kind));
        if explicit.get(i).is_some() && seen.contains(&base) {
            return Err(CliError::config(format!("duplicate label {base}")));
        }
        let mut label = base.clone();
        let mut n = 2;
        while seen.contains(&label) {
            label = format!("{base}-{n}");
            n += 1;
        }
        seen.insert(label.clone());
        out.push(label);
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_error(path))
}

/// Segments every subject of the split with each checkpoint, writes
/// per-subject JSON and an aggregate CSV per checkpoint, and a comparison
/// table with one row per checkpoint.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(CliError::config(format!(
            "--threshold must lie in [0, 1], got {}",
            args.threshold
        )));
    }
    let expected_variant = match &args.config {
        Some(path) => {
            let file = load_train_file(path)?;
            if let Some(v) = args.variant.filter(|v| *v != file.train.variant) {
                return Err(CliError::config(format!(
                    "--variant {v} contradicts the config's variant {}",
                    file.train.variant
                )));
            }
            Some(file.train.variant)
        }
        None => args.variant,
    };
    let dataset = load_dataset(&args.data)?;
    let samples = normalized(&dataset.split_samples(args.split).map_err(runtime)?)?;
    if samples.is_empty() {
        return Err(CliError::config(format!(
            "the {} split is empty",
            args.split
        )));
    }
    let predictors = args
        .checkpoints
        .iter()
        .map(|p| load_predictor(p, &samples))
        .collect::<Result<Vec<_>>>()?;
    if let Some(want) = expected_variant {
        for p in &predictors {
            if let Some(got) = p.variant.filter(|v| *v != want) {
                return Err(CliError::config(format!(
                    "checkpoint {} is a {got} model, expected {want}",
                    p.source.display()
                )));
            }
        }
    }
    let kinds: Vec<String> = predictors.iter().map(|p| p.kind.clone()).collect();
    let labels = labels(&args.labels, &kinds)?;
    let out = &args.common.out;
    let config = serde_json::json!({
        "data": absolute(&args.data),
        "split": args.split.name(),
        "threshold": args.threshold,
        "checkpoints": args.checkpoints.iter().map(|p| absolute(p)).collect::<Vec<_>>(),
        "labels": labels,
    });
    let manifest = RunManifest::start("evaluate", config, None);
    in_run_dir(out, args.common.force, manifest, || {
        let mut rows = Vec::with_capacity(predictors.len());
        for (p, label) in predictors.iter().zip(&labels) {
            let dir = out.join(REPORTS_DIR).join(label);
            std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
            let mut reports = Vec::with_capacity(samples.len());
            for s in &samples {
                let seg =
                    segment_subject(p.predictor.as_ref(), s, args.threshold).map_err(runtime)?;
                let report = evaluate(&seg.mask, &s.gt_mask_ti);
                let file = SubjectReport {
                    subject: s.subject_id.clone(),
                    label: label.clone(),
                    threshold: args.threshold,
                    report,
                };
                let json = serde_json::to_string_pretty(&file).expect("report serializes");
                write(&dir.join(format!("{}.json", s.subject_id)), &json)?;
                log::info!("{label} {}: overall {:.4}", s.subject_id, report.overall);
                reports.push((s.subject_id.clone(), report));
            }
            write(&dir.join(METRICS_CSV), &reports_csv(&reports))?;
            let only: Vec<MetricReport> = reports.iter().map(|(_, r)| *r).collect();
            rows.push(ComparisonRow {
                label: label.clone(),
                kind: p.kind.clone(),
                source: absolute(&p.source),
                summary: summarize(&only).expect("split is not empty"),
            });
        }
        let rows = rank(rows);
        write(&out.join(COMPARISON_CSV), &comparison_csv(&rows))?;
        let table = comparison_table(&rows, args.split.name());
        write(&out.join(COMPARISON_TXT), &table)?;
        write(
            &out.join(COMPARISON_JSON),
            &serde_json::to_string_pretty(&rows).expect("rows serialize"),
        )?;
        print!("{table}");
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, overall: f64) -> ComparisonRow {
        ComparisonRow {
            label: label.into(),
            kind: "static".into(),
            source: PathBuf::from(label),
            summary: MetricSummary {
                n_subjects: 1,
                mean: MetricValues {
                    overall,
                    ..Default::default()
                },
                std: MetricValues::default(),
            },
        }
    }

    #[test]
    fn rank_sorts_descending_and_keeps_ties_in_order() {
        let r = rank(vec![row("a", 0.5), row("b", 0.9), row("c", 0.5)]);
        let order: Vec<&str> = r.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(order, ["b", "a", "c"]);
    }

    #[test]
    fn labels_default_to_kind_and_are_unique() {
        let kinds = vec![
            "static".to_string(),
            "static".to_string(),
            "reference".to_string(),
        ];
        assert_eq!(
            labels(&[], &kinds).unwrap(),
            ["static", "static-2", "reference"]
        );
        assert_eq!(
            labels(&["A b".to_string()], &kinds).unwrap(),
            ["A_b", "static", "reference"]
        );
        assert!(labels(&["x".into(), "x".into()], &kinds).is_err());
        assert!(labels(&vec!["x".to_string(); 4], &kinds).is_err());
    }

    #[test]
    fn table_lists_rows_in_rank_order() {
        let rows = rank(vec![row("low", 0.1), row("high", 0.8)]);
        let t = comparison_table(&rows, "test");
        let high = t.find("high").unwrap();
        let low = t.find("low").unwrap();
        assert!(high < low);
        let csv = comparison_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("1,high,"));
    }
}
