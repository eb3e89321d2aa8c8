//! Query selection: K-Medoids over first-layer features of potential ID
//! nodes, ranked by classifier uncertainty, plus the baseline strategies.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::PotentialIdSet;
use crate::neural::row_entropy;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Number of medoids `m`.
    pub clusters: usize,
    /// Query size `b`.
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub nodes: Vec<usize>,
    pub strategy: String,
}

/// Dense symmetric matrix of pairwise Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = f(i, j);
            }
        }
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// `d[i][j] = ‖rows[i] − rows[j]‖₂`.
pub fn pairwise_distances(rows: ArrayView2<'_, f64>) -> DistanceMatrix {
    let n = rows.nrows();
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, out)| {
        let a = rows.row(i);
        for (j, slot) in out.iter_mut().enumerate() {
            if i != j {
                let b = rows.row(j);
                *slot = a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
            }
        }
    });
    DistanceMatrix { n, data }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMedoidsResult {
    /// Medoid point indices, ascending.
    pub medoids: Vec<usize>,
    /// For each point, the position in `medoids` of its cluster.
    pub assignment: Vec<usize>,
    /// Total distance of points to their medoids.
    pub cost: f64,
    /// Cost after every assignment step; non-increasing.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternating K-Medoids.
///
/// Seeds with farthest-point selection from a random start, then alternates
/// (1) assigning every point to its nearest medoid (ties to the lower
/// medoid index; a medoid always owns itself) and (2) moving each medoid to
/// the cluster member with the smallest total distance to the rest of the
/// cluster (ties to the lower index), until the medoids stop changing or
/// `max_iters` updates have run.
pub fn k_medoids(dist: &DistanceMatrix, m: usize, max_iters: usize, seed: u64) -> Result<KMedoidsResult> {
    let n = dist.len();
    if m == 0 {
        return Err(Error::Precondition("K-Medoids needs at least one cluster".into()));
    }
    if m > n {
        return Err(Error::Precondition(format!("{m} medoids requested from {n} points")));
    }
    let mut rng = seed::rng(seed, Stream::Selection, 0);
    let mut medoids = farthest_point_init(dist, m, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    let (mut assignment, mut cost) = assign(dist, &medoids);
    history.push(cost);
    while iterations < max_iters {
        let updated = update_medoids(dist, &medoids, &assignment);
        iterations += 1;
        if updated == medoids {
            converged = true;
            break;
        }
        medoids = updated;
        (assignment, cost) = assign(dist, &medoids);
        history.push(cost);
    }
    Ok(KMedoidsResult {
        medoids,
        assignment,
        cost,
        cost_history: history,
        iterations,
        converged,
    })
}

fn farthest_point_init(dist: &DistanceMatrix, m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = dist.len();
    let first = rng.random_range(0..n);
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut medoids = vec![first];
    let mut nearest: Vec<f64> = dist.row(first).to_vec();
    while medoids.len() < m {
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !chosen[i]) {
            if best.is_none_or(|b| nearest[i] > nearest[b]) {
                best = Some(i);
            }
        }
        let next = best.expect("m <= n leaves an unchosen point");
        chosen[next] = true;
        medoids.push(next);
        for (slot, &d) in nearest.iter_mut().zip(dist.row(next)) {
            *slot = slot.min(d);
        }
    }
    medoids.sort_unstable();
    medoids
}

/// Nearest-medoid assignment over ascending `medoids`, plus total cost.
fn assign(dist: &DistanceMatrix, medoids: &[usize]) -> (Vec<usize>, f64) {
    let n = dist.len();
    let mut assignment = vec![0usize; n];
    let mut cost = 0.0;
    for (i, slot) in assignment.iter_mut().enumerate() {
        if let Ok(own) = medoids.binary_search(&i) {
            *slot = own;
            continue;
        }
        let row = dist.row(i);
        let mut best = 0;
        for (k, &med) in medoids.iter().enumerate().skip(1) {
            if row[med] < row[medoids[best]] {
                best = k;
            }
        }
        *slot = best;
        cost += row[medoids[best]];
    }
    (assignment, cost)
}

fn update_medoids(dist: &DistanceMatrix, medoids: &[usize], assignment: &[usize]) -> Vec<usize> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); medoids.len()];
    for (i, &k) in assignment.iter().enumerate() {
        members[k].push(i);
    }
    let mut updated: Vec<usize> = members
        .iter()
        .map(|cluster| {
            let mut best = (f64::INFINITY, usize::MAX);
            for &cand in cluster {
                let row = dist.row(cand);
                let total: f64 = cluster.iter().map(|&q| row[q]).sum();
                if total < best.0 {
                    best = (total, cand);
                }
            }
            best.1
        })
        .collect();
    updated.sort_unstable();
    updated
}

/// Top `b` candidates by descending score, ties to the lower node index.
fn top_by_score(candidates: impl IntoIterator<Item = usize>, scores: &[f64], b: usize) -> Vec<usize> {
    let mut ranked: Vec<usize> = candidates.into_iter().collect();
    ranked.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
    ranked.truncate(b);
    ranked
}

/// K-Medoids over the potential ID nodes, returning the `b` medoids with the
/// highest classifier entropy.
///
/// When fewer than `b` nodes come out of the medoid ranking (a small or
/// empty potential set), the rest of the batch is filled with the most
/// uncertain remaining pool nodes.
pub fn select_lego(
    hidden: &Array2<f64>,
    potential: &PotentialIdSet,
    pool: &BTreeSet<usize>,
    classifier_probs: &Array2<f64>,
    config: &SelectionConfig,
) -> Result<QueryBatch> {
    let entropy = row_entropy(classifier_probs);
    let b = config.batch_size;
    let mut nodes = Vec::with_capacity(b);
    if !potential.indices.is_empty() && b > 0 {
        let rows = hidden.select(Axis(0), &potential.indices);
        let dist = pairwise_distances(rows.view());
        let m = config.clusters.min(potential.indices.len());
        let km = k_medoids(&dist, m, config.max_iters, config.seed)?;
        let medoid_nodes = km.medoids.iter().map(|&k| potential.indices[k]);
        nodes = top_by_score(medoid_nodes, &entropy, b);
    }
    if nodes.len() < b {
        let taken: BTreeSet<usize> = nodes.iter().copied().collect();
        let rest = pool.iter().copied().filter(|v| !taken.contains(v));
        nodes.extend(top_by_score(rest, &entropy, b - nodes.len()));
    }
    Ok(QueryBatch {
        nodes,
        strategy: "lego".into(),
    })
}

/// Uniform sample without replacement; truncated when the pool is smaller
/// than `b`.
pub fn select_random(pool: &BTreeSet<usize>, b: usize, seed: u64) -> QueryBatch {
    if b > pool.len() {
        log::warn!("random selection asked for {b} nodes from a pool of {}", pool.len());
    }
    let mut candidates: Vec<usize> = pool.iter().copied().collect();
    let mut rng = seed::rng(seed, Stream::Selection, 0);
    let take = b.min(candidates.len());
    let (picked, _) = candidates.partial_shuffle(&mut rng, take);
    QueryBatch {
        nodes: picked.to_vec(),
        strategy: "random".into(),
    }
}

/// The `b` pool nodes with the highest classifier entropy.
pub fn select_uncertainty(pool: &BTreeSet<usize>, classifier_probs: &Array2<f64>, b: usize) -> QueryBatch {
    let entropy = row_entropy(classifier_probs);
    QueryBatch {
        nodes: top_by_score(pool.iter().copied(), &entropy, b),
        strategy: "uncertainty".into(),
    }
}

/// Random sample from the potential ID set, topped up with random pool
/// nodes when it is too small.
pub fn select_filtered_random(potential: &PotentialIdSet, pool: &BTreeSet<usize>, b: usize, seed: u64) -> QueryBatch {
    let mut rng = seed::rng(seed, Stream::Selection, 0);
    let mut candidates = potential.indices.clone();
    let take = b.min(candidates.len());
    let (picked, _) = candidates.partial_shuffle(&mut rng, take);
    let mut nodes = picked.to_vec();
    if nodes.len() < b {
        let taken: BTreeSet<usize> = nodes.iter().copied().collect();
        let mut rest: Vec<usize> = pool.iter().copied().filter(|v| !taken.contains(v)).collect();
        let extra = (b - nodes.len()).min(rest.len());
        let (more, _) = rest.partial_shuffle(&mut rng, extra);
        nodes.extend_from_slice(more);
    }
    QueryBatch {
        nodes,
        strategy: "filter_random".into(),
    }
}
