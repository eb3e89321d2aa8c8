//! ID accuracy and OOD-detection metrics. OOD is the positive class and a
//! higher score means "more likely OOD".

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NormalizedAdjacency, OpenSetSplit};
use crate::models::ClassifierModel;
use crate::neural::{argmax_rows, row_entropy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub id_acc: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub fpr_at_80: f64,
    pub n_id_test: usize,
    pub n_ood_test: usize,
}

/// Exact-match fraction of `predictions` against `labels` over `nodes`.
pub fn id_accuracy(predictions: &[usize], labels: &[usize], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::UndefinedMetric("accuracy over an empty node set".into()));
    }
    let hits = nodes.iter().filter(|&&v| predictions[v] == labels[v]).count();
    Ok(hits as f64 / nodes.len() as f64)
}

fn check_inputs(scores: &[f64], is_ood: &[bool], need_negatives: bool) -> Result<(usize, usize)> {
    if scores.len() != is_ood.len() {
        return Err(Error::Precondition(format!(
            "{} scores for {} labels",
            scores.len(),
            is_ood.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Precondition("NaN score".into()));
    }
    let pos = is_ood.iter().filter(|&&o| o).count();
    let neg = is_ood.len() - pos;
    if pos == 0 || (need_negatives && neg == 0) {
        return Err(Error::UndefinedMetric(format!(
            "needs both classes, got {pos} OOD and {neg} ID"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn score_levels(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut levels: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match levels.last_mut() {
            Some(level) if scores[level[0]] == scores[i] => level.push(i),
            _ => levels.push(vec![i]),
        }
    }
    levels
}

/// Mann-Whitney estimate of P(score_ood > score_id), ties counting one half.
pub fn auroc(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, is_ood, true)?;
    // Average ranks, ascending, 1-based.
    let mut levels = score_levels(scores);
    levels.reverse();
    let mut rank_sum = 0.0;
    let mut next_rank = 1.0;
    for level in &levels {
        let avg = next_rank + (level.len() as f64 - 1.0) / 2.0;
        rank_sum += avg * level.iter().filter(|&&i| is_ood[i]).count() as f64;
        next_rank += level.len() as f64;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: Σ (R_k − R_{k−1}) · P_k over descending score levels.
pub fn aupr(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, is_ood, false)?;
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for level in score_levels(scores) {
        let gained = level.iter().filter(|&&i| is_ood[i]).count();
        tp += gained;
        seen += level.len();
        if gained > 0 {
            ap += (gained as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Smallest false-positive rate among thresholds `score ≥ t`, `t` an observed
/// score, whose true-positive rate is at least `target`.
pub fn fpr_at_tpr(scores: &[f64], is_ood: &[bool], target: f64) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, is_ood, true)?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Precondition(format!("TPR target {target} outside [0, 1]")));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    for level in score_levels(scores) {
        let gained = level.iter().filter(|&&i| is_ood[i]).count();
        tp += gained;
        fp += level.len() - gained;
        if tp as f64 / pos as f64 >= target {
            return Ok(fp as f64 / neg as f64);
        }
    }
    Ok(1.0)
}

/// All four metrics over the test split from classifier outputs.
pub fn evaluate_probabilities(probs: &Array2<f64>, graph: &Graph, split: &OpenSetSplit) -> Result<EvalResult> {
    let labels = graph.labels();
    let predictions = argmax_rows(probs);
    let entropy = row_entropy(probs);
    let mut id_nodes = Vec::new();
    let mut id_truth = vec![usize::MAX; graph.n_nodes()];
    let mut scores = Vec::with_capacity(split.test_nodes.len());
    let mut is_ood = Vec::with_capacity(split.test_nodes.len());
    for &v in &split.test_nodes {
        scores.push(entropy[v]);
        match split.to_id_label(labels[v]) {
            Some(c) => {
                id_nodes.push(v);
                id_truth[v] = c;
                is_ood.push(false);
            }
            None => is_ood.push(true),
        }
    }
    let n_ood_test = is_ood.iter().filter(|&&o| o).count();
    Ok(EvalResult {
        id_acc: id_accuracy(&predictions, &id_truth, &id_nodes)?,
        auroc: auroc(&scores, &is_ood)?,
        aupr: aupr(&scores, &is_ood)?,
        fpr_at_80: fpr_at_tpr(&scores, &is_ood, 0.8)?,
        n_id_test: id_nodes.len(),
        n_ood_test,
    })
}

/// Evaluates a trained classifier on the test split with entropy OOD scores.
pub fn evaluate(
    model: &ClassifierModel,
    graph: &Graph,
    adj: &NormalizedAdjacency,
    split: &OpenSetSplit,
) -> Result<EvalResult> {
    evaluate_probabilities(&model.probabilities(graph, adj)?, graph, split)
}
