//! Round logs, per-run summaries, the aggregate table, and score dumps.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::active::{ExperimentOutcome, Problem, RoundReport};
use crate::error::{Error, Result};
use crate::metrics::EvalResult;

/// Final line of a run log; the aggregate table averages these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub id_acc: Option<f64>,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub fpr_at_80: Option<f64>,
    pub precision: Option<f64>,
    pub annotations: usize,
    pub truncated: bool,
}

impl RunSummary {
    pub fn new(run: String, dataset: String, strategy: String, seed: u64, outcome: &ExperimentOutcome) -> Self {
        let eval = outcome.final_eval;
        Self {
            run,
            dataset,
            strategy,
            seed,
            id_acc: eval.map(|e| e.id_acc),
            auroc: eval.map(|e| e.auroc),
            aupr: eval.map(|e| e.aupr),
            fpr_at_80: eval.map(|e| e.fpr_at_80),
            precision: outcome.precision(),
            annotations: outcome.annotations(),
            truncated: outcome.truncated,
        }
    }
}

/// One line of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Round {
        run: String,
        #[serde(flatten)]
        report: RoundReport,
    },
    Final(RunSummary),
}

/// Writes the round reports and the summary as line-delimited JSON.
pub fn write_run_log(path: &Path, reports: &[RoundReport], summary: &RunSummary) -> Result<()> {
    let mut out = String::new();
    for report in reports {
        let record = LogRecord::Round {
            run: summary.run.clone(),
            report: report.clone(),
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&LogRecord::Final(summary.clone()))?);
    out.push('\n');
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads every record of a run log.
pub fn read_run_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(records)
}

pub const SUMMARY_COLUMNS: [&str; 8] = [
    "dataset",
    "strategy",
    "runs",
    "id_acc",
    "auroc",
    "aupr",
    "fpr_at_80",
    "precision",
];

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean of every metric per (dataset, strategy), in order of first
/// appearance, as tab-separated text. Empty cells read `NA`.
pub fn summary_table(summaries: &[RunSummary]) -> String {
    let mut groups: Vec<((String, String), Vec<&RunSummary>)> = Vec::new();
    for s in summaries {
        let key = (s.dataset.clone(), s.strategy.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(s),
            None => groups.push((key, vec![s])),
        }
    }
    let mut out = SUMMARY_COLUMNS.join("\t");
    out.push('\n');
    let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    for ((dataset, strategy), members) in groups {
        let col = |f: fn(&RunSummary) -> Option<f64>| cell(mean(members.iter().map(|s| f(s))));
        let row = [
            dataset,
            strategy,
            members.len().to_string(),
            col(|s| s.id_acc),
            col(|s| s.auroc),
            col(|s| s.aupr),
            col(|s| s.fpr_at_80),
            col(|s| s.precision),
        ];
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}

/// `(node, score, is_ood)` for every test node.
pub fn test_scores(problem: &Problem, scores: &[f64]) -> Vec<(usize, f64, bool)> {
    problem
        .split
        .test_nodes
        .iter()
        .map(|&v| (v, scores[v], problem.split.is_ood(&problem.graph, v)))
        .collect()
}

/// Writes raw test-node OOD scores as tab-separated text.
pub fn write_scores(path: &Path, rows: &[(usize, f64, bool)]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "node\tscore\tis_ood").expect("write to vec");
    for (node, score, is_ood) in rows {
        writeln!(out, "{node}\t{score}\t{}", u8::from(*is_ood)).expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Equal-width histogram of scores split by OOD flag:
/// `(lower, upper, id_count, ood_count)` per bin.
pub fn score_histogram(rows: &[(usize, f64, bool)], bins: usize) -> Vec<(f64, f64, usize, usize)> {
    if rows.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<(f64, f64, usize, usize)> = (0..bins)
        .map(|b| (lo + b as f64 * width, lo + (b + 1) as f64 * width, 0, 0))
        .collect();
    for &(_, score, is_ood) in rows {
        let b = (((score - lo) / width) as usize).min(bins - 1);
        if is_ood {
            out[b].3 += 1;
        } else {
            out[b].2 += 1;
        }
    }
    out
}

/// Echo of an evaluation for logs.
pub fn eval_line(eval: &EvalResult) -> String {
    format!(
        "ID ACC {:.4}  AUROC {:.4}  AUPR {:.4}  FPR@80 {:.4}",
        eval.id_acc, eval.auroc, eval.aupr, eval.fpr_at_80
    )
}
