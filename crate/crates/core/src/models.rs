//! The `C+1`-way OOD filter and the `C`-way ID classifier, both two-layer
//! GCNs trained full-graph from a fresh initialization.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, LabelState, NormalizedAdjacency, OpenSetSplit};
use crate::neural::{
    adam_step, argmax_rows, ce_loss_and_grad, gcn_backward, gcn_forward, row_entropy, weighted_ce_loss_and_grad,
    ForwardCache, GcnParams, LossGrad, Mode, OptimizerState, PROB_FLOOR,
};

/// Optimization settings shared by both models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub dropout: f64,
    /// L2 coefficient on the first-layer weights only.
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            lr: 0.01,
            dropout: 0.5,
            weight_decay: 5e-4,
            epochs: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// What happened during a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Training loss (without the weight-decay term) at every epoch.
    pub losses: Vec<f64>,
    /// Epoch whose parameters were kept, or `None` when no validation set
    /// was available and the last parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterModel {
    pub params: GcnParams,
    pub w_unknown: f64,
    pub n_id_classes: usize,
    pub config: TrainConfig,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub params: GcnParams,
    pub config: TrainConfig,
    pub history: TrainHistory,
}

/// Pool nodes whose filter prediction falls among the first `C` outputs, in
/// increasing node order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PotentialIdSet {
    pub indices: Vec<usize>,
}

/// Full-graph training loop with best-validation parameter selection.
///
/// Each epoch runs a training-mode forward pass, `loss` on its cache, the
/// backward pass and one Adam step, then scores the updated parameters in
/// evaluation mode against `val` (`(node, target)` pairs). The parameters
/// with the highest validation accuracy are returned; ties prefer lower
/// validation cross-entropy, then the earlier epoch.
fn fit(
    graph: &Graph,
    adj: &NormalizedAdjacency,
    init: GcnParams,
    config: &TrainConfig,
    val: &[(usize, usize)],
    seed: u64,
    loss: impl Fn(&ForwardCache) -> Result<LossGrad>,
) -> Result<(GcnParams, TrainHistory)> {
    config.validate()?;
    let x = graph.sparse_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init;
    let mut opt = OptimizerState::new(&params, config.lr, config.weight_decay);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, f64, GcnParams)> = None;

    for epoch in 0..config.epochs {
        let cache = gcn_forward(
            adj,
            x,
            &params,
            Mode::Train {
                dropout: config.dropout,
            },
            &mut rng,
        )?;
        let lg = loss(&cache)?;
        history.losses.push(lg.loss);
        let grads = gcn_backward(adj, x, &params, &cache, &lg.grad_logits, config.weight_decay)?;
        adam_step(&mut params, &grads, &mut opt);

        if val.is_empty() {
            continue;
        }
        let eval = gcn_forward(adj, x, &params, Mode::Eval, &mut rng)?;
        let (acc, val_loss) = score(&eval.probs, val);
        let better = match &best {
            None => true,
            Some((best_acc, best_loss, _)) => acc > *best_acc || (acc == *best_acc && val_loss < *best_loss),
        };
        if better {
            history.best_epoch = Some(epoch);
            history.best_val_accuracy = acc;
            best = Some((acc, val_loss, params.clone()));
        }
    }
    let params = best.map_or(params, |(_, _, p)| p);
    Ok((params, history))
}

/// Accuracy and mean cross-entropy of `probs` on `(node, target)` pairs.
fn score(probs: &Array2<f64>, targets: &[(usize, usize)]) -> (f64, f64) {
    let pred = argmax_rows(probs);
    let mut correct = 0usize;
    let mut loss = 0.0;
    for &(node, target) in targets {
        if pred[node] == target {
            correct += 1;
        }
        loss -= probs[[node, target]].max(PROB_FLOOR).ln();
    }
    let n = targets.len() as f64;
    (correct as f64 / n, loss / n)
}

/// Trains the `C+1`-way filter on labeled ID nodes and annotated-unknown
/// nodes. Validation counts OOD validation nodes as class `C`.
#[allow(clippy::too_many_arguments)]
pub fn train_filter(
    graph: &Graph,
    adj: &NormalizedAdjacency,
    split: &OpenSetSplit,
    state: &LabelState,
    w_unknown: f64,
    config: &TrainConfig,
    seed: u64,
    warm_start: Option<&GcnParams>,
) -> Result<FilterModel> {
    if state.labeled.is_empty() {
        return Err(Error::Precondition(
            "filter training needs at least one labeled node".into(),
        ));
    }
    if !(w_unknown > 0.0 && w_unknown.is_finite()) {
        return Err(Error::Config(format!(
            "unknown-class weight must be positive, got {w_unknown}"
        )));
    }
    let c = split.n_id_classes();
    let init = initial_params(graph, config, c + 1, seed, warm_start)?;
    let val = split.val_targets(graph);
    let (params, history) = fit(graph, adj, init, config, &val, seed, |cache| {
        weighted_ce_loss_and_grad(cache, &state.labeled, &state.unknown, w_unknown)
    })?;
    Ok(FilterModel {
        params,
        w_unknown,
        n_id_classes: c,
        config: *config,
        history,
    })
}

/// Trains the `C`-way ID classifier on labeled nodes. Validation uses the ID
/// validation nodes only.
pub fn train_classifier(
    graph: &Graph,
    adj: &NormalizedAdjacency,
    split: &OpenSetSplit,
    labeled: &BTreeMap<usize, usize>,
    config: &TrainConfig,
    seed: u64,
    warm_start: Option<&GcnParams>,
) -> Result<ClassifierModel> {
    if labeled.is_empty() {
        return Err(Error::Precondition(
            "classifier training needs at least one labeled node".into(),
        ));
    }
    let c = split.n_id_classes();
    let init = initial_params(graph, config, c, seed, warm_start)?;
    let val: Vec<(usize, usize)> = split.val_targets(graph).into_iter().filter(|&(_, t)| t < c).collect();
    let (params, history) = fit(graph, adj, init, config, &val, seed, |cache| {
        ce_loss_and_grad(cache, labeled)
    })?;
    Ok(ClassifierModel {
        params,
        config: *config,
        history,
    })
}

fn initial_params(
    graph: &Graph,
    config: &TrainConfig,
    n_out: usize,
    seed: u64,
    warm_start: Option<&GcnParams>,
) -> Result<GcnParams> {
    match warm_start {
        Some(p) => {
            if p.w0.dim() != (graph.n_features(), config.hidden) || p.n_out() != n_out {
                return Err(Error::Structural("warm-start parameters have the wrong shape".into()));
            }
            Ok(p.clone())
        }
        None => {
            // a separate stream from the dropout draws inside `fit`
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B);
            Ok(GcnParams::glorot(graph.n_features(), config.hidden, n_out, &mut rng))
        }
    }
}

/// Evaluation-mode forward pass.
pub fn eval_forward(graph: &Graph, adj: &NormalizedAdjacency, params: &GcnParams) -> Result<ForwardCache> {
    // Eval mode draws nothing from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    gcn_forward(adj, graph.sparse_features(), params, Mode::Eval, &mut rng)
}

/// Pool nodes the filter places among the first `C` classes.
pub fn potential_id_nodes(
    filter: &FilterModel,
    graph: &Graph,
    adj: &NormalizedAdjacency,
    pool: &BTreeSet<usize>,
) -> Result<PotentialIdSet> {
    let cache = eval_forward(graph, adj, &filter.params)?;
    Ok(potential_from_outputs(&cache.logits, filter.n_id_classes, pool))
}

pub(crate) fn potential_from_outputs(
    outputs: &Array2<f64>,
    n_id_classes: usize,
    pool: &BTreeSet<usize>,
) -> PotentialIdSet {
    let pred = argmax_rows(outputs);
    PotentialIdSet {
        indices: pool.iter().copied().filter(|&i| pred[i] < n_id_classes).collect(),
    }
}

impl ClassifierModel {
    /// First-layer features `H` in evaluation mode.
    pub fn hidden_features(&self, graph: &Graph, adj: &NormalizedAdjacency) -> Result<Array2<f64>> {
        Ok(eval_forward(graph, adj, &self.params)?.hidden)
    }

    pub fn probabilities(&self, graph: &Graph, adj: &NormalizedAdjacency) -> Result<Array2<f64>> {
        Ok(eval_forward(graph, adj, &self.params)?.probs)
    }

    /// Predicted ID class per node.
    pub fn predict(&self, graph: &Graph, adj: &NormalizedAdjacency) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.probabilities(graph, adj)?))
    }

    /// Entropy of the predicted distribution per node; higher means more
    /// likely OOD.
    pub fn ood_scores(&self, graph: &Graph, adj: &NormalizedAdjacency) -> Result<Vec<f64>> {
        Ok(row_entropy(&self.probabilities(graph, adj)?))
    }
}

/// Free-function form of [`ClassifierModel::hidden_features`].
pub fn hidden_features(model: &ClassifierModel, graph: &Graph, adj: &NormalizedAdjacency) -> Result<Array2<f64>> {
    model.hidden_features(graph, adj)
}

/// Free-function form of [`ClassifierModel::ood_scores`].
pub fn ood_scores(model: &ClassifierModel, graph: &Graph, adj: &NormalizedAdjacency) -> Result<Vec<f64>> {
    model.ood_scores(graph, adj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_outputs_keep_everything() {
        let out = Array2::zeros((5, 4));
        let pool: BTreeSet<usize> = [0, 2, 4].into();
        assert_eq!(potential_from_outputs(&out, 3, &pool).indices, vec![0, 2, 4]);
    }

    #[test]
    fn outputs_favoring_unknown_keep_nothing() {
        let out = array![[0.0, 0.0, 1.0], [0.1, 0.2, 5.0]];
        let pool: BTreeSet<usize> = [0, 1].into();
        assert!(potential_from_outputs(&out, 2, &pool).indices.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                hidden: 0,
                ..Default::default()
            },
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                dropout: 1.0,
                ..Default::default()
            },
            TrainConfig {
                weight_decay: -1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
