//! Read-only views of a session, rebuilt after every change.

use std::collections::{BTreeMap, BTreeSet};

use gosl_core::oracle::Answer;
use gosl_core::session::Session;
use serde::{Deserialize, Serialize};

/// Number of features in [`PendingItem::feature_preview`].
pub const PREVIEW_FEATURES: usize = 10;

/// One nonzero feature of a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureValue {
    pub index: usize,
    pub value: f64,
}

/// Annotator answers among a set of nodes. `classes[k]` counts answers of
/// ID class `k`; nodes without an answer are counted as `unannotated`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSummary {
    pub classes: Vec<usize>,
    pub unknown: usize,
    pub unannotated: usize,
}

/// A node of the pending batch that still needs an answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingItem {
    pub node_id: usize,
    pub round: usize,
    /// Largest features by magnitude, ties to the lower index.
    pub feature_preview: Vec<FeatureValue>,
    pub neighbor_summary: NeighborSummary,
    pub degree: usize,
}

/// [`PendingItem`] with the answers among nodes exactly two hops away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDetail {
    #[serde(flatten)]
    pub item: PendingItem,
    pub two_hop: NeighborSummary,
}

/// Loop phase as shown to clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Pending nodes are waiting for answers.
    Annotating,
    /// The batch is complete and the next one is being computed.
    Advancing,
    /// Nothing is pending; the session is finished.
    Idle,
    /// Advancing failed; see `error`.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub round: usize,
    /// Answers accepted so far, including the current batch.
    pub answered: usize,
    /// Unanswered nodes in the current batch.
    pub pending: usize,
    pub total_budget: usize,
    pub precision_so_far: Option<f64>,
    pub status: Phase,
    pub finished: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Everything the read endpoints serve.
#[derive(Debug, Clone)]
pub struct View {
    pub status: Status,
    pub queue: Vec<PendingItem>,
    pub details: BTreeMap<usize, NodeDetail>,
}

fn summarize(
    nodes: impl IntoIterator<Item = usize>,
    answers: &BTreeMap<usize, Answer>,
    classes: usize,
) -> NeighborSummary {
    let mut out = NeighborSummary {
        classes: vec![0; classes],
        unknown: 0,
        unannotated: 0,
    };
    for v in nodes {
        match answers.get(&v) {
            Some(Answer::Id(c)) => out.classes[*c] += 1,
            Some(Answer::Unknown) => out.unknown += 1,
            None => out.unannotated += 1,
        }
    }
    out
}

fn feature_preview(session: &Session, node: usize) -> Vec<FeatureValue> {
    let x = session.experiment().problem().graph.sparse_features();
    let (cols, vals) = x.row(node);
    let mut row: Vec<FeatureValue> = cols
        .iter()
        .zip(vals)
        .filter(|&(_, &v)| v != 0.0)
        .map(|(&index, &value)| FeatureValue { index, value })
        .collect();
    row.sort_by(|a, b| b.value.abs().total_cmp(&a.value.abs()).then(a.index.cmp(&b.index)));
    row.truncate(PREVIEW_FEATURES);
    row
}

/// Every answer the annotator has given, settled or pending.
fn all_answers(session: &Session) -> BTreeMap<usize, Answer> {
    let progress = session.experiment().progress();
    let state = &progress.state;
    let mut answers: BTreeMap<usize, Answer> = state.labeled.iter().map(|(&v, &c)| (v, Answer::Id(c))).collect();
    answers.extend(state.unknown.iter().map(|&v| (v, Answer::Unknown)));
    if let Some(p) = &progress.pending {
        answers.extend(p.answers.iter().map(|(&v, &a)| (v, a)));
    }
    answers
}

pub fn build(session: &Session, phase: Option<Phase>, error: Option<String>) -> View {
    let experiment = session.experiment();
    let graph = &experiment.problem().graph;
    let classes = experiment.problem().split.n_id_classes();
    let progress = experiment.progress();
    let answers = all_answers(session);
    let pending = progress.pending.as_ref();

    let mut queue = Vec::new();
    let mut details = BTreeMap::new();
    let advancing = matches!(phase, Some(Phase::Advancing | Phase::Failed));
    if let Some(p) = pending.filter(|_| !advancing) {
        for node in p.unanswered() {
            let neighbors = graph.neighbors(node);
            let item = PendingItem {
                node_id: node,
                round: p.round,
                feature_preview: feature_preview(session, node),
                neighbor_summary: summarize(neighbors.iter().copied(), &answers, classes),
                degree: graph.degree(node),
            };
            let near: BTreeSet<usize> = neighbors.iter().copied().chain([node]).collect();
            let two_hop: BTreeSet<usize> = neighbors
                .iter()
                .flat_map(|&u| graph.neighbors(u).iter().copied())
                .filter(|w| !near.contains(w))
                .collect();
            details.insert(
                node,
                NodeDetail {
                    item: item.clone(),
                    two_hop: summarize(two_hop, &answers, classes),
                },
            );
            queue.push(item);
        }
    }

    let phase = phase.unwrap_or(if queue.is_empty() {
        Phase::Idle
    } else {
        Phase::Annotating
    });
    let status = Status {
        round: progress.round(),
        answered: progress.answered() + pending.map_or(0, |p| p.answers.len()),
        pending: queue.len(),
        total_budget: experiment.plan().total,
        precision_so_far: progress.precision(),
        status: phase,
        finished: experiment.is_finished(),
        error,
    };
    View { status, queue, details }
}
