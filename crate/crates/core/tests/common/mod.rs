//! Shared checks and fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use gosl_core::active::{
    run_round, run_simulated, Experiment, ExperimentConfig, Problem, RoundReport, Step, Strategy, Variant,
};
use gosl_core::datasets::{generate_sbm, SbmSpec};
use gosl_core::graph::{build_split, normalize_adjacency, Graph};
use gosl_core::metrics::{aupr, auroc, fpr_at_tpr};
use gosl_core::models::TrainConfig;
use gosl_core::neural::{
    ce_loss_and_grad, gcn_backward, gcn_forward_with_masks, softmax_rows, weighted_ce_loss_and_grad, DropoutMasks,
    GcnParams,
};
use gosl_core::oracle::SimulatedOracle;
use gosl_core::selector::{k_medoids, DistanceMatrix};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sbm_spec(seed: u64, class_sizes: Option<Vec<usize>>) -> SbmSpec {
    SbmSpec {
        classes: 5,
        nodes_per_class: 80,
        class_sizes,
        p_intra: 0.05,
        p_inter: 0.005,
        feature_dim: 16,
        class_mean_separation: 1.0,
        feature_noise_std: 1.0,
        seed,
    }
}

/// 5-class, 400-node SBM with ID classes {0, 1, 2}.
pub fn sbm_problem(seed: u64, class_sizes: Option<Vec<usize>>) -> Arc<Problem> {
    let graph = generate_sbm(&sbm_spec(seed, class_sizes)).unwrap();
    let split = build_split(&graph, &[0, 1, 2], seed).unwrap();
    Arc::new(Problem::new(graph, split).unwrap())
}

/// Small SBM with a short training schedule, for loop-mechanics tests.
pub fn tiny_problem(seed: u64) -> Arc<Problem> {
    let spec = SbmSpec {
        classes: 4,
        nodes_per_class: 60,
        class_sizes: None,
        p_intra: 0.1,
        p_inter: 0.01,
        feature_dim: 6,
        class_mean_separation: 1.5,
        feature_noise_std: 1.0,
        seed,
    };
    let graph = generate_sbm(&spec).unwrap();
    let split = build_split(&graph, &[0, 1, 2], seed).unwrap();
    Arc::new(Problem::new(graph, split).unwrap())
}

pub fn fast_config() -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

pub fn without_timing(reports: &[RoundReport]) -> Vec<RoundReport> {
    reports
        .iter()
        .cloned()
        .map(|mut r| {
            r.elapsed_ms = 0;
            r
        })
        .collect()
}

pub fn random_graph(rng: &mut impl Rng, n: usize, p: f64, f: usize) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let features = Array2::from_shape_fn((n, f), |_| {
        if rng.random_bool(0.6) {
            rng.random_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    Graph::from_edges(n, &edges, features, vec![0; n], 1).unwrap().0
}

/// Dense reference for `D̃^{-1/2}(A+I)D̃^{-1/2}`.
pub fn dense_normalized(graph: &Graph) -> Array2<f64> {
    let n = graph.n_nodes();
    let mut a = graph.adjacency().to_dense();
    for i in 0..n {
        a[[i, i]] += 1.0;
    }
    let d: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] / (d[i] * d[j]).sqrt())
}

// ---------------------------------------------------------------- gradients

pub struct GradientReport {
    pub instances: usize,
    pub max_rel_error: f64,
}

fn rel_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compares analytic and central-difference gradients of both losses on
/// `instances` random problems with `n ≤ 20`, `F ≤ 8`. Instances with a
/// first-layer pre-activation close enough to zero for the finite
/// difference to straddle the ReLU kink are redrawn.
pub fn gradient_suite(instances: usize, seed: u64) -> GradientReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let mut accepted = 0;
    let h = 1e-6;
    while accepted < instances {
        let n = rng.random_range(3..=20);
        let f = rng.random_range(1..=8);
        let hidden = rng.random_range(1..=6);
        let c = rng.random_range(2..=4);
        let graph = random_graph(&mut rng, n, 0.3, f);
        let adj = gosl_core::graph::normalize_adjacency(&graph).unwrap();
        let x = graph.sparse_features();
        let weighted = accepted % 2 == 1;
        let n_out = if weighted { c + 1 } else { c };
        let params = GcnParams::glorot(f, hidden, n_out, &mut rng);
        let masks = if rng.random_bool(0.5) {
            Some(DropoutMasks::sample(x, n, hidden, 0.5, &mut rng))
        } else {
            None
        };
        let weight_decay = if rng.random_bool(0.5) { 5e-4 } else { 0.0 };

        let mut nodes: Vec<usize> = (0..n).collect();
        nodes.shuffle(&mut rng);
        let n_labeled = rng.random_range(1..=n.div_ceil(2));
        let labeled: BTreeMap<usize, usize> = nodes[..n_labeled]
            .iter()
            .map(|&v| (v, rng.random_range(0..c)))
            .collect();
        let unknown: BTreeSet<usize> = if weighted {
            nodes[n_labeled..]
                .iter()
                .copied()
                .filter(|_| rng.random_bool(0.5))
                .collect()
        } else {
            BTreeSet::new()
        };
        let w = [0.001, 0.1, 0.2, 1.0][rng.random_range(0..4)];

        let loss_of = |p: &GcnParams| -> f64 {
            let cache = gcn_forward_with_masks(&adj, x, p, masks.clone()).unwrap();
            let lg = if weighted {
                weighted_ce_loss_and_grad(&cache, &labeled, &unknown, w).unwrap()
            } else {
                ce_loss_and_grad(&cache, &labeled).unwrap()
            };
            lg.loss + 0.5 * weight_decay * p.w0.mapv(|v| v * v).sum()
        };

        let cache = gcn_forward_with_masks(&adj, x, &params, masks.clone()).unwrap();
        if cache.pre_hidden.iter().any(|&v| v != 0.0 && v.abs() < 1e-4) {
            continue;
        }
        let lg = if weighted {
            weighted_ce_loss_and_grad(&cache, &labeled, &unknown, w).unwrap()
        } else {
            ce_loss_and_grad(&cache, &labeled).unwrap()
        };
        let grads = gcn_backward(&adj, x, &params, &cache, &lg.grad_logits, weight_decay).unwrap();

        let numeric = |which: usize| -> Array2<f64> {
            let shape = if which == 0 { params.w0.dim() } else { params.w1.dim() };
            Array2::from_shape_fn(shape, |(i, j)| {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let (p, m) = if which == 0 {
                    (&mut plus.w0, &mut minus.w0)
                } else {
                    (&mut plus.w1, &mut minus.w1)
                };
                p[[i, j]] += h;
                m[[i, j]] -= h;
                (loss_of(&plus) - loss_of(&minus)) / (2.0 * h)
            })
        };
        max_rel = max_rel
            .max(rel_error(&grads.w0, &numeric(0)))
            .max(rel_error(&grads.w1, &numeric(1)));
        accepted += 1;
    }
    GradientReport {
        instances,
        max_rel_error: max_rel,
    }
}

// ------------------------------------------------------------------ metrics

/// Pair-counting AUROC.
pub fn brute_auroc(scores: &[f64], is_ood: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in (0..scores.len()).filter(|&i| is_ood[i]) {
        for j in (0..scores.len()).filter(|&j| !is_ood[j]) {
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn distinct_desc(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn counts_at(scores: &[f64], is_ood: &[bool], t: f64) -> (usize, usize) {
    let tp = (0..scores.len()).filter(|&i| scores[i] >= t && is_ood[i]).count();
    let fp = (0..scores.len()).filter(|&i| scores[i] >= t && !is_ood[i]).count();
    (tp, fp)
}

/// Average precision by sweeping every distinct threshold.
pub fn brute_aupr(scores: &[f64], is_ood: &[bool]) -> f64 {
    let pos = is_ood.iter().filter(|&&o| o).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in distinct_desc(scores) {
        let (tp, fp) = counts_at(scores, is_ood, t);
        let recall = tp as f64 / pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Minimum FPR over thresholds reaching the target TPR.
pub fn brute_fpr(scores: &[f64], is_ood: &[bool], target: f64) -> f64 {
    let pos = is_ood.iter().filter(|&&o| o).count() as f64;
    let neg = is_ood.len() as f64 - pos;
    distinct_desc(scores)
        .into_iter()
        .filter_map(|t| {
            let (tp, fp) = counts_at(scores, is_ood, t);
            (tp as f64 / pos >= target).then_some(fp as f64 / neg)
        })
        .fold(1.0, f64::min)
}

/// A random scored instance with both classes, sometimes with heavy ties.
pub fn random_scored(rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=200);
    let levels = if rng.random_bool(0.5) {
        rng.random_range(1..=6)
    } else {
        0
    };
    let mut is_ood: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    is_ood[0] = true;
    is_ood[1] = false;
    let scores = (0..n)
        .map(|i| {
            let base: f64 = rng.random();
            let s = if is_ood[i] { base + 0.3 } else { base };
            if levels > 0 {
                (s * levels as f64).floor()
            } else {
                s
            }
        })
        .collect();
    (scores, is_ood)
}

/// Largest absolute deviation of the three metrics from the brute-force
/// oracles over `instances` random cases.
pub fn metric_oracle_suite(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (scores, is_ood) = random_scored(&mut rng);
        let target = [0.8, 0.5, 0.95, 1.0][rng.random_range(0..4)];
        worst = worst
            .max((auroc(&scores, &is_ood).unwrap() - brute_auroc(&scores, &is_ood)).abs())
            .max((aupr(&scores, &is_ood).unwrap() - brute_aupr(&scores, &is_ood)).abs())
            .max((fpr_at_tpr(&scores, &is_ood, target).unwrap() - brute_fpr(&scores, &is_ood, target)).abs());
    }
    worst
}

// ---------------------------------------------------------------- k-medoids

fn combinations(n: usize, m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for last in (m - 1)..n {
        for mut c in combinations(last, m - 1) {
            c.push(last);
            out.push(c);
        }
    }
    out
}

fn cost_of(dist: &DistanceMatrix, medoids: &[usize]) -> f64 {
    (0..dist.len())
        .map(|i| medoids.iter().map(|&m| dist.get(i, m)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Checks K-Medoids on `instances` random point sets with `n ≤ 10`,
/// `m ≤ 3`: non-increasing cost, cost at least the brute-force optimum, and
/// the result is a fixed point of assignment and medoid update.
pub fn kmedoids_suite(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..instances {
        let n = rng.random_range(1..=10);
        let m = rng.random_range(1..=n.min(3));
        let dim = rng.random_range(1..=3);
        let grid = rng.random_bool(0.3);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        if grid {
                            rng.random_range(0..3) as f64
                        } else {
                            rng.random_range(-5.0..5.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let dist = DistanceMatrix::from_fn(n, |i, j| {
            pts[i]
                .iter()
                .zip(&pts[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        });
        let r = k_medoids(&dist, m, 100, case as u64).map_err(|e| e.to_string())?;
        if r.cost_history.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            return Err(format!("case {case}: cost increased {:?}", r.cost_history));
        }
        let optimum = combinations(n, m)
            .iter()
            .map(|c| cost_of(&dist, c))
            .fold(f64::INFINITY, f64::min);
        if r.cost < optimum - 1e-9 {
            return Err(format!("case {case}: cost {} below optimum {optimum}", r.cost));
        }
        if (r.cost - cost_of(&dist, &r.medoids)).abs() > 1e-9 {
            return Err(format!("case {case}: reported cost disagrees with medoids"));
        }
        if !r.converged {
            return Err(format!("case {case}: did not converge"));
        }
        // Fixed point: each point sits with a nearest medoid, and each
        // medoid minimizes total distance within its cluster.
        for i in 0..n {
            let own = dist.get(i, r.medoids[r.assignment[i]]);
            let best = r
                .medoids
                .iter()
                .map(|&md| dist.get(i, md))
                .fold(f64::INFINITY, f64::min);
            if own > best + 1e-12 {
                return Err(format!("case {case}: point {i} not at its nearest medoid"));
            }
        }
        for (k, &md) in r.medoids.iter().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| r.assignment[i] == k).collect();
            let total = |c: usize| members.iter().map(|&q| dist.get(c, q)).sum::<f64>();
            let best = members.iter().map(|&c| total(c)).fold(f64::INFINITY, f64::min);
            if total(md) > best + 1e-12 {
                return Err(format!("case {case}: medoid {md} is not optimal for its cluster"));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- invariants

fn all_configs() -> Vec<ExperimentConfig> {
    let mut configs = Vec::new();
    for strategy in [Strategy::Random, Strategy::Uncertainty] {
        configs.push(ExperimentConfig {
            strategy,
            ..fast_config()
        });
    }
    for variant in Variant::ALL {
        configs.push(ExperimentConfig {
            variant,
            ..fast_config()
        });
    }
    configs
}

/// Steps one experiment with the simulated oracle, checking the label-state
/// partition, single queries, and precision telescoping after every round.
pub fn checked_run(problem: &Arc<Problem>, config: &ExperimentConfig, seed: u64) -> Result<Vec<RoundReport>, String> {
    let err = |e: gosl_core::Error| e.to_string();
    let mut oracle = SimulatedOracle::new(&problem.graph, &problem.split);
    let mut experiment = Experiment::new(Arc::clone(problem), config.clone(), seed, None).map_err(err)?;
    let label = config.label();
    loop {
        let (_, step) = run_round(&mut experiment, &mut oracle).map_err(err)?;
        let progress = experiment.progress();
        if !progress.state.is_partition_of(&problem.split.pool_nodes) {
            return Err(format!("{label}: label state is not a partition of the pool"));
        }
        if oracle.max_calls() > 1 {
            return Err(format!("{label}: a node was queried {} times", oracle.max_calls()));
        }
        let (p, n): (usize, usize) = progress
            .reports
            .iter()
            .fold((0, 0), |(p, n), r| (p + r.p, n + r.batch.len()));
        let telescoped = p as f64 / n as f64;
        if progress.precision() != Some(telescoped) {
            return Err(format!("{label}: precision {:?} != {telescoped}", progress.precision()));
        }
        if step == Step::Finished {
            break;
        }
    }
    let progress = experiment.progress();
    let c = problem.split.n_id_classes();
    let truncated = progress.truncated();
    if !truncated && progress.answered() != 15 * c {
        return Err(format!(
            "{label}: {} annotations, expected {}",
            progress.answered(),
            15 * c
        ));
    }
    if truncated != progress.state.pool.is_empty() {
        return Err(format!("{label}: truncation flag disagrees with the pool"));
    }
    for node in progress.reports.iter().flat_map(|r| &r.batch) {
        if oracle.calls(*node) != 1 {
            return Err(format!("{label}: node {node} queried {} times", oracle.calls(*node)));
        }
    }
    Ok(progress.reports.clone())
}

/// The full invariant suite: loop invariants and determinism replay for
/// every strategy and variant, normalized adjacency against a dense
/// reference, and softmax shift invariance.
pub fn invariant_suite(seed: u64) -> Result<(), String> {
    let problem = tiny_problem(seed);
    for config in all_configs() {
        let first = checked_run(&problem, &config, seed)?;
        let second = checked_run(&problem, &config, seed)?;
        if without_timing(&first) != without_timing(&second) {
            return Err(format!("{}: replay differs", config.label()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..50 {
        let n = rng.random_range(1..=30);
        let p = rng.random_range(0.0..0.5);
        let graph = random_graph(&mut rng, n, p, 2);
        let sparse = normalize_adjacency(&graph)
            .map_err(|e| e.to_string())?
            .matrix()
            .to_dense();
        let dev = (&sparse - &dense_normalized(&graph))
            .mapv(f64::abs)
            .fold(0.0, |a: f64, &b| a.max(b));
        if dev > 1e-12 {
            return Err(format!("normalized adjacency deviates by {dev}"));
        }
    }

    for _ in 0..50 {
        let rows = rng.random_range(1..6);
        let cols = rng.random_range(1..6);
        let logits = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-20.0..20.0));
        let shifts: Vec<f64> = (0..rows).map(|_| rng.random_range(-500.0..500.0)).collect();
        let shifted = Array2::from_shape_fn((rows, cols), |(i, j)| logits[[i, j]] + shifts[i]);
        let dev = (&softmax_rows(&logits) - &softmax_rows(&shifted))
            .mapv(f64::abs)
            .fold(0.0, |a: f64, &b| a.max(b));
        if dev > 1e-9 {
            return Err(format!("softmax changed by {dev} under a row shift"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- smoke run

pub struct SmokeReport {
    pub seconds: f64,
    pub id_acc: f64,
    pub mean_id_entropy: f64,
    pub mean_ood_entropy: f64,
}

/// The full pipeline with default settings on the 5-class, 400-node SBM.
pub fn smoke_run(seed: u64) -> SmokeReport {
    let started = Instant::now();
    let problem = sbm_problem(seed, None);
    let outcome = run_simulated(Arc::clone(&problem), &ExperimentConfig::default(), seed).unwrap();
    let model = outcome.final_model.as_ref().expect("final model");
    let scores = model.ood_scores(&problem.graph, &problem.adj).unwrap();
    let seconds = started.elapsed().as_secs_f64();
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for &v in &problem.split.test_nodes {
        if problem.split.is_ood(&problem.graph, v) {
            ood.push(scores[v]);
        } else {
            id.push(scores[v]);
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    SmokeReport {
        seconds,
        id_acc: outcome.final_eval.expect("final evaluation").id_acc,
        mean_id_entropy: mean(&id),
        mean_ood_entropy: mean(&ood),
    }
}
