//! The active-learning loop.
//!
//! An [`Experiment`] alternates between two phases: a batch of nodes is
//! pending annotation, then [`Experiment::advance`] records the answers and
//! plans the next batch (filter training, potential-ID extraction,
//! classifier training, selection). The first pending batch is the random
//! initial draw. After the last round the classifier is retrained on every
//! labeled node and evaluated on the test split.
//!
//! The same machine drives simulated runs ([`run_experiment`]) and
//! human-annotated sessions, which persist [`ExperimentProgress`] between
//! answers.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{draw_initial, normalize_adjacency, Graph, LabelState, NormalizedAdjacency, OpenSetSplit};
use crate::metrics::{evaluate, EvalResult};
use crate::models::{potential_id_nodes, train_classifier, train_filter, ClassifierModel, PotentialIdSet, TrainConfig};
use crate::oracle::{Answer, Oracle, SimulatedOracle};
use crate::seed::{self, Stream};
use crate::selector::{
    select_filtered_random, select_lego, select_random, select_uncertainty, QueryBatch, SelectionConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Lego,
    Random,
    Uncertainty,
}

/// Ablations of the full selection pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Cluster over the whole pool without filtering.
    NoFilter,
    /// Filter, then sample the potential ID nodes at random.
    NoCluster,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoFilter, Variant::NoCluster];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFilter => "no_filter",
            Variant::NoCluster => "no_cluster",
        }
    }
}

/// Budget sizes as multiples of the number of ID classes `C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub initial: usize,
    pub per_round: usize,
    pub total: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            initial: 5,
            per_round: 2,
            total: 15,
        }
    }
}

/// Concrete label budget for a given `C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub initial: usize,
    pub per_round: usize,
    pub total: usize,
    pub rounds: usize,
}

impl BudgetPlan {
    pub fn new(config: &BudgetConfig, n_id_classes: usize) -> Result<Self> {
        let initial = config.initial * n_id_classes;
        let per_round = config.per_round * n_id_classes;
        let total = config.total * n_id_classes;
        if total < initial {
            return Err(Error::Config(format!(
                "total budget {total} is below the initial budget {initial}"
            )));
        }
        let rest = total - initial;
        if rest > 0 && (per_round == 0 || !rest.is_multiple_of(per_round)) {
            return Err(Error::Config(format!(
                "budget after the initial draw ({rest}) is not a multiple of the per-round budget ({per_round})"
            )));
        }
        Ok(Self {
            initial,
            per_round,
            total,
            rounds: if rest == 0 { 0 } else { rest / per_round },
        })
    }
}

/// Everything that configures one experiment apart from the data and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub variant: Variant,
    /// Loss weight of the unknown class in the filter.
    pub w_unknown: f64,
    /// Number of K-Medoids clusters.
    pub clusters: usize,
    pub kmedoids_max_iters: usize,
    pub train: TrainConfig,
    pub budget: BudgetConfig,
    /// Start each round's models from the previous round's parameters.
    pub warm_start: bool,
    /// Restrict the initial draw to ID nodes (simulated oracle only).
    pub id_only_seeding: bool,
    /// Count the initial draw in cumulative precision.
    pub precision_includes_initial: bool,
    /// Retrain and evaluate a classifier after every round, not just the last.
    pub evaluate_rounds: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Lego,
            variant: Variant::Full,
            w_unknown: 0.1,
            clusters: 48,
            kmedoids_max_iters: 100,
            train: TrainConfig::default(),
            budget: BudgetConfig::default(),
            warm_start: false,
            id_only_seeding: false,
            precision_includes_initial: true,
            evaluate_rounds: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.w_unknown > 0.0 && self.w_unknown.is_finite()) {
            return Err(Error::Config(format!(
                "w_unknown must be positive, got {}",
                self.w_unknown
            )));
        }
        if self.clusters == 0 {
            return Err(Error::Config("clusters must be positive".into()));
        }
        if self.strategy != Strategy::Lego && self.variant != Variant::Full {
            return Err(Error::Config(format!(
                "variant {} only applies to the lego strategy",
                self.variant.name()
            )));
        }
        Ok(())
    }

    /// Label of the strategy and variant, e.g. `lego`, `lego-no_filter`.
    pub fn label(&self) -> String {
        let base = match self.strategy {
            Strategy::Lego => "lego",
            Strategy::Random => "random",
            Strategy::Uncertainty => "uncertainty",
        };
        match self.variant {
            Variant::Full => base.to_string(),
            v => format!("{base}-{}", v.name()),
        }
    }
}

/// Graph, normalized adjacency, and split: the immutable inputs of a run.
#[derive(Debug, Clone)]
pub struct Problem {
    pub graph: Graph,
    pub adj: NormalizedAdjacency,
    pub split: OpenSetSplit,
}

impl Problem {
    pub fn new(graph: Graph, split: OpenSetSplit) -> Result<Self> {
        let adj = normalize_adjacency(&graph)?;
        Ok(Self { graph, adj, split })
    }
}

/// Outcome of one round. Round 0 is the initial random draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub strategy: String,
    pub batch: Vec<usize>,
    /// ID answers in this batch.
    pub p: usize,
    /// Unknown answers in this batch.
    pub q: usize,
    /// Cumulative ID fraction of all counted answers so far, or `None`
    /// before anything is counted.
    pub precision: Option<f64>,
    pub metrics: Option<EvalResult>,
    /// Time spent training and selecting for this round.
    pub elapsed_ms: u64,
    /// Whether the pool could not supply a full batch.
    pub truncated: bool,
}

/// A batch waiting for answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingBatch {
    pub round: usize,
    pub strategy: String,
    pub nodes: Vec<usize>,
    pub answers: BTreeMap<usize, Answer>,
    pub elapsed_ms: u64,
    pub truncated: bool,
}

impl PendingBatch {
    pub fn unanswered(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().copied().filter(|v| !self.answers.contains_key(v))
    }

    pub fn is_complete(&self) -> bool {
        self.answers.len() == self.nodes.len()
    }
}

/// Serializable loop state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentProgress {
    pub state: LabelState,
    pub reports: Vec<RoundReport>,
    pub pending: Option<PendingBatch>,
    pub final_eval: Option<EvalResult>,
    pub finished: bool,
    /// Counted answers so far (ID, unknown) for cumulative precision.
    pub counted: (usize, usize),
}

impl ExperimentProgress {
    pub fn answered(&self) -> usize {
        self.reports.iter().map(|r| r.batch.len()).sum()
    }

    pub fn truncated(&self) -> bool {
        self.reports.iter().any(|r| r.truncated)
    }

    /// Round index of the pending batch, or of the last report.
    pub fn round(&self) -> usize {
        match &self.pending {
            Some(p) => p.round,
            None => self.reports.last().map_or(0, |r| r.round),
        }
    }

    pub fn precision(&self) -> Option<f64> {
        self.reports.last().and_then(|r| r.precision)
    }
}

/// Why an answer was refused.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnswerRejection {
    #[error("node {0} is not in the pending batch")]
    NotPending(usize),
    #[error("node {0} was already answered")]
    AlreadyAnswered(usize),
    #[error("class {answer} is out of range for {classes} ID classes")]
    OutOfRange { answer: usize, classes: usize },
}

/// What [`Experiment::advance`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// A new batch is pending.
    Planned,
    Finished,
}

/// The loop state machine for one seed.
#[derive(Debug, Clone)]
pub struct Experiment {
    problem: Arc<Problem>,
    config: ExperimentConfig,
    plan: BudgetPlan,
    seed: u64,
    progress: ExperimentProgress,
    last_classifier: Option<ClassifierModel>,
    last_filter_params: Option<crate::neural::GcnParams>,
    last_eval_model: Option<ClassifierModel>,
    final_model: Option<ClassifierModel>,
}

impl Experiment {
    /// Starts an experiment with the initial draw pending. `eligible`
    /// restricts that draw and is required when `id_only_seeding` is set.
    pub fn new(
        problem: Arc<Problem>,
        config: ExperimentConfig,
        seed: u64,
        eligible: Option<&dyn Fn(usize) -> bool>,
    ) -> Result<Self> {
        config.validate()?;
        let plan = BudgetPlan::new(&config.budget, problem.split.n_id_classes())?;
        if config.id_only_seeding && eligible.is_none() {
            return Err(Error::Config("ID-only seeding needs ground-truth labels".into()));
        }
        let eligible = if config.id_only_seeding { eligible } else { None };
        let nodes = draw_initial(&problem.split.pool_nodes, plan.initial, seed, eligible)?;
        let progress = ExperimentProgress {
            state: LabelState::new(problem.split.pool_nodes.iter().copied()),
            reports: Vec::new(),
            pending: Some(PendingBatch {
                round: 0,
                strategy: "initial".into(),
                nodes,
                answers: BTreeMap::new(),
                elapsed_ms: 0,
                truncated: false,
            }),
            final_eval: None,
            finished: false,
            counted: (0, 0),
        };
        Ok(Self {
            problem,
            config,
            plan,
            seed,
            progress,
            last_classifier: None,
            last_filter_params: None,
            last_eval_model: None,
            final_model: None,
        })
    }

    /// Rebuilds an experiment from persisted progress. Training state that
    /// is not persisted (warm-start parameters, the final model) is
    /// recomputed as needed.
    pub fn resume(
        problem: Arc<Problem>,
        config: ExperimentConfig,
        seed: u64,
        progress: ExperimentProgress,
    ) -> Result<Self> {
        config.validate()?;
        if config.warm_start && progress.round() > 0 {
            return Err(Error::Config("warm-started experiments cannot be resumed".into()));
        }
        let plan = BudgetPlan::new(&config.budget, problem.split.n_id_classes())?;
        let mut original = problem.split.pool_nodes.clone();
        original.sort_unstable();
        if !progress.state.is_partition_of(&original) {
            return Err(Error::Structural(
                "persisted label state does not match the split".into(),
            ));
        }
        Ok(Self {
            problem,
            config,
            plan,
            seed,
            progress,
            last_classifier: None,
            last_filter_params: None,
            last_eval_model: None,
            final_model: None,
        })
    }

    pub fn problem(&self) -> &Arc<Problem> {
        &self.problem
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn plan(&self) -> &BudgetPlan {
        &self.plan
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn progress(&self) -> &ExperimentProgress {
        &self.progress
    }

    pub fn pending(&self) -> Option<&PendingBatch> {
        self.progress.pending.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.progress.finished
    }

    /// The classifier retrained after the last round, once finished. Not
    /// available on a resumed session that finished before the resume.
    pub fn final_model(&self) -> Option<&ClassifierModel> {
        self.final_model.as_ref()
    }

    /// Reports, final evaluation and label state so far.
    pub fn outcome(&self) -> ExperimentOutcome {
        ExperimentOutcome {
            reports: self.progress.reports.clone(),
            final_eval: self.progress.final_eval,
            final_model: self.final_model.clone(),
            state: self.progress.state.clone(),
            truncated: self.progress.truncated(),
        }
    }

    /// Checks an answer against the pending batch without recording it.
    pub fn check_answer(&self, node: usize, answer: Answer) -> std::result::Result<(), AnswerRejection> {
        let pending = self
            .progress
            .pending
            .as_ref()
            .ok_or(AnswerRejection::NotPending(node))?;
        if !pending.nodes.contains(&node) {
            return Err(if self.progress.state.pool.contains(&node) {
                AnswerRejection::NotPending(node)
            } else {
                AnswerRejection::AlreadyAnswered(node)
            });
        }
        if pending.answers.contains_key(&node) {
            return Err(AnswerRejection::AlreadyAnswered(node));
        }
        let classes = self.problem.split.n_id_classes();
        if let Answer::Id(c) = answer {
            if c >= classes {
                return Err(AnswerRejection::OutOfRange { answer: c, classes });
            }
        }
        Ok(())
    }

    /// Records one answer for the pending batch.
    pub fn answer(&mut self, node: usize, answer: Answer) -> std::result::Result<(), AnswerRejection> {
        self.check_answer(node, answer)?;
        self.progress
            .pending
            .as_mut()
            .expect("checked above")
            .answers
            .insert(node, answer);
        Ok(())
    }

    /// Applies the completed pending batch and plans the next one, or
    /// trains and evaluates the final classifier when the budget is spent
    /// or the pool ran dry.
    pub fn advance(&mut self) -> Result<Step> {
        if self.progress.finished {
            return Ok(Step::Finished);
        }
        let pending = match self.progress.pending.take() {
            Some(p) if p.is_complete() => p,
            Some(p) => {
                let missing = p.nodes.len() - p.answers.len();
                self.progress.pending = Some(p);
                return Err(Error::Precondition(format!("{missing} pending nodes are unanswered")));
            }
            None => return Err(Error::Precondition("nothing is pending".into())),
        };
        self.apply(pending)?;

        let round = self.progress.round() + 1;
        let more = round <= self.plan.rounds && !self.progress.truncated() && !self.progress.state.pool.is_empty();
        if more {
            self.progress.pending = Some(self.plan_round(round)?);
            return Ok(Step::Planned);
        }
        let last_metrics = self.progress.reports.last().and_then(|r| r.metrics);
        if let Some(eval) = last_metrics {
            self.progress.final_eval = Some(eval);
            self.final_model = self.last_eval_model.take();
        } else if let Some((model, eval)) = self.evaluate_after(self.progress.round())? {
            self.progress.final_eval = Some(eval);
            self.final_model = Some(model);
        }
        self.progress.finished = true;
        Ok(Step::Finished)
    }

    fn apply(&mut self, pending: PendingBatch) -> Result<()> {
        let (mut p, mut q) = (0, 0);
        for &node in &pending.nodes {
            let answer = pending.answers[&node];
            self.progress.state.record(node, answer)?;
            if answer.is_id() {
                p += 1;
            } else {
                q += 1;
            }
        }
        if pending.round > 0 || self.config.precision_includes_initial {
            self.progress.counted.0 += p;
            self.progress.counted.1 += q;
        }
        let (ids, unknowns) = self.progress.counted;
        let precision = (ids + unknowns > 0).then(|| ids as f64 / (ids + unknowns) as f64);
        let metrics = if self.config.evaluate_rounds {
            match self.evaluate_after(pending.round)? {
                Some((model, eval)) => {
                    self.last_eval_model = Some(model);
                    Some(eval)
                }
                None => None,
            }
        } else {
            None
        };
        self.progress.reports.push(RoundReport {
            round: pending.round,
            strategy: pending.strategy,
            batch: pending.nodes,
            p,
            q,
            precision,
            metrics,
            elapsed_ms: pending.elapsed_ms,
            truncated: pending.truncated,
        });
        Ok(())
    }

    /// Trains the evaluation classifier on the labels present after `round`.
    fn evaluate_after(&self, round: usize) -> Result<Option<(ClassifierModel, EvalResult)>> {
        let labeled = &self.progress.state.labeled;
        if labeled.is_empty() {
            log::warn!("no labeled ID nodes after round {round}; skipping evaluation");
            return Ok(None);
        }
        let pr = &self.problem;
        let model = train_classifier(
            &pr.graph,
            &pr.adj,
            &pr.split,
            labeled,
            &self.config.train,
            seed::mix(self.seed, Stream::FinalClassifier, round as u64),
            None,
        )?;
        let eval = evaluate(&model, &pr.graph, &pr.adj, &pr.split)?;
        Ok(Some((model, eval)))
    }

    fn plan_round(&mut self, round: usize) -> Result<PendingBatch> {
        let started = Instant::now();
        let pool = &self.progress.state.pool;
        let b = self.plan.per_round.min(pool.len());
        let truncated = b < self.plan.per_round;
        if truncated {
            log::warn!(
                "round {round}: pool has {} nodes, batch needs {}",
                pool.len(),
                self.plan.per_round
            );
        }
        let r = round as u64;
        let selection_seed = seed::mix(self.seed, Stream::Selection, r);
        let batch = match self.config.strategy {
            Strategy::Random => select_random(pool, b, selection_seed),
            _ if self.progress.state.labeled.is_empty() => {
                log::warn!("round {round}: no labeled ID nodes yet; selecting at random");
                let mut batch = select_random(pool, b, selection_seed);
                batch.strategy = "random_fallback".into();
                batch
            }
            Strategy::Uncertainty => {
                let classifier = self.train_round_classifier(r)?;
                let probs = classifier.probabilities(&self.problem.graph, &self.problem.adj)?;
                select_uncertainty(&self.progress.state.pool, &probs, b)
            }
            Strategy::Lego => self.select_lego_round(r, b, selection_seed)?,
        };
        let QueryBatch { nodes, strategy } = batch;
        Ok(PendingBatch {
            round,
            strategy,
            nodes,
            answers: BTreeMap::new(),
            elapsed_ms: started.elapsed().as_millis() as u64,
            truncated,
        })
    }

    fn select_lego_round(&mut self, r: u64, b: usize, selection_seed: u64) -> Result<QueryBatch> {
        let pr = Arc::clone(&self.problem);
        let state = &self.progress.state;
        let potential = if self.config.variant == Variant::NoFilter {
            PotentialIdSet {
                indices: state.pool.iter().copied().collect(),
            }
        } else {
            let warm = self.last_filter_params.as_ref().filter(|_| self.config.warm_start);
            let filter = train_filter(
                &pr.graph,
                &pr.adj,
                &pr.split,
                state,
                self.config.w_unknown,
                &self.config.train,
                seed::mix(self.seed, Stream::Filter, r),
                warm,
            )?;
            let potential = potential_id_nodes(&filter, &pr.graph, &pr.adj, &state.pool)?;
            if self.config.warm_start {
                self.last_filter_params = Some(filter.params);
            }
            potential
        };
        if self.config.variant == Variant::NoCluster {
            return Ok(select_filtered_random(
                &potential,
                &self.progress.state.pool,
                b,
                selection_seed,
            ));
        }
        let classifier = self.train_round_classifier(r)?;
        let hidden = classifier.hidden_features(&pr.graph, &pr.adj)?;
        let probs = classifier.probabilities(&pr.graph, &pr.adj)?;
        let config = SelectionConfig {
            clusters: self.config.clusters,
            batch_size: b,
            max_iters: self.config.kmedoids_max_iters,
            seed: selection_seed,
        };
        let mut batch = select_lego(&hidden, &potential, &self.progress.state.pool, &probs, &config)?;
        if self.config.variant == Variant::NoFilter {
            batch.strategy = "lego-no_filter".into();
        }
        Ok(batch)
    }

    fn train_round_classifier(&mut self, r: u64) -> Result<ClassifierModel> {
        let pr = &self.problem;
        let warm = self
            .last_classifier
            .as_ref()
            .filter(|_| self.config.warm_start)
            .map(|m| &m.params);
        let model = train_classifier(
            &pr.graph,
            &pr.adj,
            &pr.split,
            &self.progress.state.labeled,
            &self.config.train,
            seed::mix(self.seed, Stream::Classifier, r),
            warm,
        )?;
        if self.config.warm_start {
            self.last_classifier = Some(model.clone());
        }
        Ok(model)
    }
}

/// Answers the pending batch from `oracle` and advances the experiment.
/// Returns the report of the batch just applied.
pub fn run_round(experiment: &mut Experiment, oracle: &mut dyn Oracle) -> Result<(RoundReport, Step)> {
    let nodes: Vec<usize> = match experiment.pending() {
        Some(p) => p.unanswered().collect(),
        None => return Err(Error::Precondition("nothing is pending".into())),
    };
    for node in nodes {
        experiment.answer(node, oracle.query(node))?;
    }
    let step = experiment.advance()?;
    let report = experiment
        .progress
        .reports
        .last()
        .cloned()
        .expect("advance pushes a report");
    Ok((report, step))
}

/// Result of a complete simulated run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub final_eval: Option<EvalResult>,
    pub final_model: Option<ClassifierModel>,
    pub state: LabelState,
    pub truncated: bool,
}

impl ExperimentOutcome {
    pub fn precision(&self) -> Option<f64> {
        self.reports.last().and_then(|r| r.precision)
    }

    pub fn annotations(&self) -> usize {
        self.reports.iter().map(|r| r.batch.len()).sum()
    }
}

/// Runs every round against `oracle` and returns the reports and final
/// evaluation.
pub fn run_experiment(
    problem: Arc<Problem>,
    config: &ExperimentConfig,
    oracle: &mut dyn Oracle,
    seed: u64,
    eligible: Option<&dyn Fn(usize) -> bool>,
) -> Result<ExperimentOutcome> {
    let mut experiment = Experiment::new(problem, config.clone(), seed, eligible)?;
    while run_round(&mut experiment, oracle)?.1 == Step::Planned {}
    Ok(experiment.outcome())
}

/// [`run_experiment`] with the ground-truth oracle; ID-only seeding uses
/// the ground truth to restrict the initial draw.
pub fn run_simulated(problem: Arc<Problem>, config: &ExperimentConfig, seed: u64) -> Result<ExperimentOutcome> {
    let mut oracle = SimulatedOracle::new(&problem.graph, &problem.split);
    let truth = oracle.clone();
    let is_id = move |v: usize| truth.peek(v).is_id();
    run_experiment(problem, config, &mut oracle, seed, Some(&is_id))
}
