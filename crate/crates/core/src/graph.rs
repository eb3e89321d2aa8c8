//! Graph representation, adjacency normalization, open-set splits and the
//! evolving annotation state.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Csr;
use crate::oracle::{Answer, Oracle};
use crate::seed::{self, Stream};

/// Validation nodes drawn per ID class, for each of the ID and OOD partitions.
pub const VAL_PER_CLASS: usize = 10;
/// Test nodes drawn from each partition on full-size graphs.
pub const TEST_PER_PARTITION: usize = 500;
/// Fraction of a partition used for test when it cannot supply the full quota.
pub const SMALL_GRAPH_TEST_FRACTION: f64 = 0.4;
/// Smallest number of ID classes an open-set split may use.
pub const MIN_ID_CLASSES: usize = 3;

/// Counts of input edges that were dropped while building a graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub self_loops: usize,
    pub duplicates: usize,
}

/// Immutable attributed graph with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adjacency: Csr,
    features: Array2<f64>,
    sparse_features: Csr,
    labels: Vec<usize>,
    n_classes_total: usize,
}

impl Graph {
    /// Validates and wraps the parts. `adjacency` must be binary,
    /// symmetric, with an empty diagonal.
    pub fn new(adjacency: Csr, features: Array2<f64>, labels: Vec<usize>, n_classes_total: usize) -> Result<Self> {
        let n = adjacency.n_rows();
        if adjacency.n_cols() != n {
            return Err(Error::Structural("adjacency is not square".into()));
        }
        if features.nrows() != n || labels.len() != n {
            return Err(Error::Structural(format!(
                "{n} nodes but {} feature rows and {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if !adjacency.is_symmetric() {
            return Err(Error::Structural("adjacency is not symmetric".into()));
        }
        for i in 0..n {
            let (cols, vals) = adjacency.row(i);
            if cols.binary_search(&i).is_ok() {
                return Err(Error::Structural(format!("self-loop stored at node {i}")));
            }
            if vals.iter().any(|&v| v != 1.0) {
                return Err(Error::Structural(format!("non-binary edge weight at node {i}")));
            }
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes_total) {
            return Err(Error::Structural(format!(
                "label {y} out of range for {n_classes_total} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Structural("feature matrix has non-finite entries".into()));
        }
        let sparse_features = Csr::from_dense(features.view());
        Ok(Self {
            adjacency,
            features,
            sparse_features,
            labels,
            n_classes_total,
        })
    }

    /// Builds a graph from an undirected-or-directed edge list: every edge is
    /// symmetrized, self-loops and repeats are dropped and counted.
    pub fn from_edges(
        n_nodes: usize,
        edges: &[(usize, usize)],
        features: Array2<f64>,
        labels: Vec<usize>,
        n_classes_total: usize,
    ) -> Result<(Self, EdgeStats)> {
        let mut stats = EdgeStats::default();
        let mut undirected = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n_nodes || b >= n_nodes {
                return Err(Error::Structural(format!(
                    "edge ({a}, {b}) references a node outside 0..{n_nodes}"
                )));
            }
            if a == b {
                stats.self_loops += 1;
                continue;
            }
            if !undirected.insert((a.min(b), a.max(b))) {
                stats.duplicates += 1;
            }
        }
        let triplets = undirected
            .iter()
            .flat_map(|&(a, b)| [(a, b, 1.0), (b, a, 1.0)])
            .collect();
        let adjacency = Csr::from_triplets(n_nodes, n_nodes, triplets)?;
        Ok((Self::new(adjacency, features, labels, n_classes_total)?, stats))
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.n_rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes_total(&self) -> usize {
        self.n_classes_total
    }

    /// Number of stored (directed) adjacency entries; twice the undirected
    /// edge count.
    pub fn n_directed_edges(&self) -> usize {
        self.adjacency.nnz()
    }

    pub fn adjacency(&self) -> &Csr {
        &self.adjacency
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// The feature matrix with only its nonzeros stored.
    pub fn sparse_features(&self) -> &Csr {
        &self.sparse_features
    }

    /// Ground-truth labels. Only simulation and evaluation code should read
    /// these.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        self.adjacency.row(node).0
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors(node).len()
    }

    /// Number of nodes per original class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes_total];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Copy with every feature row scaled to unit L1 norm (zero rows stay
    /// zero).
    pub fn with_row_normalized_features(&self) -> Self {
        let mut features = self.features.clone();
        for mut row in features.rows_mut() {
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
        let sparse_features = Csr::from_dense(features.view());
        Self {
            features,
            sparse_features,
            ..self.clone()
        }
    }
}

/// `D̃^{-1/2}(A+I)D̃^{-1/2}` for a graph's adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency(Csr);

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Csr {
        &self.0
    }
}

pub fn normalize_adjacency(graph: &Graph) -> Result<NormalizedAdjacency> {
    normalize_csr(graph.adjacency()).map(NormalizedAdjacency)
}

pub(crate) fn normalize_csr(adj: &Csr) -> Result<Csr> {
    if !adj.is_symmetric() {
        return Err(Error::Structural("adjacency is not symmetric".into()));
    }
    let n = adj.n_rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let (cols, vals) = adj.row(i);
            if cols.binary_search(&i).is_ok() {
                return Err(Error::Structural(format!("diagonal entry stored at node {i}")));
            }
            Ok(1.0 / (vals.iter().sum::<f64>() + 1.0).sqrt())
        })
        .collect::<Result<_>>()?;
    let mut triplets = Vec::with_capacity(adj.nnz() + n);
    for i in 0..n {
        let (cols, vals) = adj.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            triplets.push((i, j, inv_sqrt[i] * v * inv_sqrt[j]));
        }
        triplets.push((i, i, inv_sqrt[i] * inv_sqrt[i]));
    }
    Csr::from_triplets(n, n, triplets)
}

/// Partition of classes into ID/OOD and of nodes into validation, test and
/// the annotation pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSetSplit {
    pub id_classes: Vec<usize>,
    pub ood_classes: Vec<usize>,
    /// Indexed by original class; `Some(k)` for ID classes.
    pub id_label_map: Vec<Option<usize>>,
    pub val_nodes: Vec<usize>,
    pub test_nodes: Vec<usize>,
    pub pool_nodes: Vec<usize>,
}

impl OpenSetSplit {
    /// Number of ID classes `C`.
    pub fn n_id_classes(&self) -> usize {
        self.id_classes.len()
    }

    /// Remaps an original class to its ID index.
    pub fn to_id_label(&self, original: usize) -> Option<usize> {
        self.id_label_map.get(original).copied().flatten()
    }

    /// Inverse of [`Self::to_id_label`].
    pub fn to_original(&self, id_label: usize) -> Option<usize> {
        self.id_classes.get(id_label).copied()
    }

    pub fn is_ood(&self, graph: &Graph, node: usize) -> bool {
        self.to_id_label(graph.labels()[node]).is_none()
    }

    /// Validation nodes paired with their training target: the ID label, or
    /// `C` for OOD nodes.
    pub fn val_targets(&self, graph: &Graph) -> Vec<(usize, usize)> {
        let c = self.n_id_classes();
        self.val_nodes
            .iter()
            .map(|&v| (v, self.to_id_label(graph.labels()[v]).unwrap_or(c)))
            .collect()
    }

    /// Fraction of all nodes that belong to OOD classes.
    pub fn ood_ratio(&self, graph: &Graph) -> f64 {
        let ood = (0..graph.n_nodes()).filter(|&i| self.is_ood(graph, i)).count();
        ood as f64 / graph.n_nodes() as f64
    }
}

/// Draws validation and test nodes for the given ID classes.
///
/// Validation takes `10·C` nodes from each of the ID and OOD partitions;
/// test takes 500 from each, or `⌊0.4·|partition|⌋` when a partition is too
/// small for the full quota. Everything else forms the pool.
pub fn build_split(graph: &Graph, id_classes: &[usize], seed: u64) -> Result<OpenSetSplit> {
    let total = graph.n_classes_total();
    let c = id_classes.len();
    if c < MIN_ID_CLASSES {
        return Err(Error::Precondition(format!(
            "at least {MIN_ID_CLASSES} ID classes are required, got {c}"
        )));
    }
    let mut id_label_map = vec![None; total];
    for (k, &cls) in id_classes.iter().enumerate() {
        if cls >= total {
            return Err(Error::Precondition(format!(
                "ID class {cls} does not exist (graph has {total} classes)"
            )));
        }
        if id_label_map[cls].replace(k).is_some() {
            return Err(Error::Precondition(format!("ID class {cls} listed twice")));
        }
    }
    let ood_classes: Vec<usize> = (0..total).filter(|&k| id_label_map[k].is_none()).collect();

    let counts = graph.class_counts();
    for &cls in id_classes {
        if counts[cls] < VAL_PER_CLASS {
            return Err(Error::Capacity {
                what: format!("ID class {cls}"),
                needed: VAL_PER_CLASS,
                available: counts[cls],
            });
        }
    }

    let (mut id_nodes, mut ood_nodes): (Vec<usize>, Vec<usize>) =
        (0..graph.n_nodes()).partition(|&i| id_label_map[graph.labels()[i]].is_some());
    let mut rng = seed::rng(seed, Stream::Split, 0);
    id_nodes.shuffle(&mut rng);
    ood_nodes.shuffle(&mut rng);

    let n_val = VAL_PER_CLASS * c;
    let mut val_nodes = Vec::with_capacity(2 * n_val);
    let mut test_nodes = Vec::new();
    let mut pool_nodes = Vec::new();
    for (name, nodes) in [("ID partition", &id_nodes), ("OOD partition", &ood_nodes)] {
        let n_test = test_quota(nodes.len(), n_val);
        if n_test == 0 || n_val + n_test > nodes.len() {
            return Err(Error::Capacity {
                what: format!("{name} (validation + test)"),
                needed: n_val + n_test.max(1),
                available: nodes.len(),
            });
        }
        val_nodes.extend_from_slice(&nodes[..n_val]);
        test_nodes.extend_from_slice(&nodes[n_val..n_val + n_test]);
        pool_nodes.extend_from_slice(&nodes[n_val + n_test..]);
    }
    val_nodes.sort_unstable();
    test_nodes.sort_unstable();
    pool_nodes.sort_unstable();

    Ok(OpenSetSplit {
        id_classes: id_classes.to_vec(),
        ood_classes,
        id_label_map,
        val_nodes,
        test_nodes,
        pool_nodes,
    })
}

fn test_quota(partition: usize, n_val: usize) -> usize {
    if partition >= n_val + TEST_PER_PARTITION {
        TEST_PER_PARTITION
    } else {
        (partition as f64 * SMALL_GRAPH_TEST_FRACTION).floor() as usize
    }
}

/// Labeled ID nodes, annotated-unknown nodes, and the remaining pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelState {
    pub labeled: BTreeMap<usize, usize>,
    pub unknown: BTreeSet<usize>,
    pub pool: BTreeSet<usize>,
}

impl LabelState {
    pub fn new(pool: impl IntoIterator<Item = usize>) -> Self {
        Self {
            labeled: BTreeMap::new(),
            unknown: BTreeSet::new(),
            pool: pool.into_iter().collect(),
        }
    }

    /// Moves `node` out of the pool according to `answer`.
    pub fn record(&mut self, node: usize, answer: Answer) -> Result<()> {
        if !self.pool.remove(&node) {
            return Err(Error::Precondition(format!("node {node} is not in the pool")));
        }
        match answer {
            Answer::Id(c) => {
                self.labeled.insert(node, c);
            }
            Answer::Unknown => {
                self.unknown.insert(node);
            }
        }
        Ok(())
    }

    /// True when the three sets are disjoint and cover exactly `original`.
    pub fn is_partition_of(&self, original: &[usize]) -> bool {
        let total = self.labeled.len() + self.unknown.len() + self.pool.len();
        let mut union: BTreeSet<usize> = self.pool.clone();
        union.extend(self.labeled.keys().copied());
        union.extend(self.unknown.iter().copied());
        total == union.len() && union.iter().copied().eq(original.iter().copied())
    }
}

/// Uniformly samples `budget` pool nodes. `eligible` restricts the draw
/// (used for ID-only seeding).
pub fn draw_initial(
    pool: &[usize],
    budget: usize,
    seed: u64,
    eligible: Option<&dyn Fn(usize) -> bool>,
) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = match eligible {
        Some(f) => pool.iter().copied().filter(|&v| f(v)).collect(),
        None => pool.to_vec(),
    };
    if budget > candidates.len() {
        return Err(Error::Capacity {
            what: "initial label budget".into(),
            needed: budget,
            available: candidates.len(),
        });
    }
    let mut rng = seed::rng(seed, Stream::InitialDraw, 0);
    let (drawn, _) = candidates.partial_shuffle(&mut rng, budget);
    Ok(drawn.to_vec())
}

/// Blind initial draw from the pool, annotated by `oracle`.
pub fn init_label_state(
    split: &OpenSetSplit,
    initial_budget: usize,
    seed: u64,
    oracle: &mut dyn Oracle,
) -> Result<LabelState> {
    let mut state = LabelState::new(split.pool_nodes.iter().copied());
    for node in draw_initial(&split.pool_nodes, initial_budget, seed, None)? {
        state.record(node, oracle.query(node))?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn path3() -> Graph {
        Graph::from_edges(3, &[(0, 1), (1, 2)], Array2::zeros((3, 1)), vec![0, 0, 0], 1)
            .unwrap()
            .0
    }

    #[test]
    fn isolated_node_normalizes_to_one() {
        let g = Graph::from_edges(1, &[], array![[1.0]], vec![0], 1).unwrap().0;
        assert_eq!(normalize_adjacency(&g).unwrap().matrix().to_dense(), array![[1.0]]);
    }

    #[test]
    fn single_edge_normalizes_to_halves() {
        let g = Graph::from_edges(2, &[(0, 1)], Array2::zeros((2, 1)), vec![0, 0], 1)
            .unwrap()
            .0;
        let a = normalize_adjacency(&g).unwrap().matrix().to_dense();
        assert!(a.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn path_entry_matches_hand_value() {
        let a = normalize_adjacency(&path3()).unwrap();
        assert!((a.matrix().get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((a.matrix().get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.matrix().get(0, 2), 0.0);
    }

    #[test]
    fn edges_are_symmetrized_and_cleaned() {
        let (g, stats) = Graph::from_edges(
            3,
            &[(0, 1), (1, 0), (2, 2), (1, 2), (1, 2)],
            Array2::zeros((3, 1)),
            vec![0, 0, 0],
            1,
        )
        .unwrap();
        assert_eq!(
            stats,
            EdgeStats {
                self_loops: 1,
                duplicates: 2
            }
        );
        assert_eq!(g.n_directed_edges(), 4);
        assert!(g.adjacency().is_symmetric());
    }

    #[test]
    fn asymmetric_adjacency_is_rejected() {
        let adj = Csr::from_triplets(2, 2, vec![(0, 1, 1.0)]).unwrap();
        assert!(matches!(normalize_csr(&adj), Err(Error::Structural(_))));
        assert!(Graph::new(adj, Array2::zeros((2, 1)), vec![0, 0], 1).is_err());
    }

    #[test]
    fn invalid_graph_parts_are_rejected() {
        let adj = Csr::from_triplets(2, 2, vec![]).unwrap();
        assert!(Graph::new(adj.clone(), Array2::zeros((2, 1)), vec![0, 5], 2).is_err());
        assert!(Graph::new(adj.clone(), array![[f64::NAN], [0.0]], vec![0, 0], 1).is_err());
        assert!(Graph::new(adj, Array2::zeros((3, 1)), vec![0, 0], 1).is_err());
    }

    fn labeled_line(counts: &[usize]) -> Graph {
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
            .collect();
        let n = labels.len();
        Graph::from_edges(n, &[], Array2::zeros((n, 1)), labels, counts.len())
            .unwrap()
            .0
    }

    #[test]
    fn split_sizes_on_small_graph() {
        let g = labeled_line(&[80, 80, 80, 80, 80]);
        let s = build_split(&g, &[0, 1, 2], 7).unwrap();
        // ID partition 240 -> test 96; OOD partition 160 -> test 64.
        assert_eq!(s.val_nodes.len(), 60);
        assert_eq!(s.test_nodes.len(), 96 + 64);
        assert_eq!(s.pool_nodes.len(), 400 - 60 - 160);
        assert_eq!(s.ood_classes, vec![3, 4]);
        let n_val_id = s.val_nodes.iter().filter(|&&v| !s.is_ood(&g, v)).count();
        assert_eq!(n_val_id, 30);
    }

    #[test]
    fn full_size_split_uses_fixed_quota() {
        let g = labeled_line(&[400, 400, 400, 400, 400]);
        let s = build_split(&g, &[0, 2, 4], 1).unwrap();
        assert_eq!(s.test_nodes.len(), 1000);
        assert_eq!(s.val_nodes.len(), 60);
    }

    #[test]
    fn split_errors() {
        let g = labeled_line(&[50, 9, 50, 50]);
        assert!(matches!(
            build_split(&g, &[0, 1, 2], 0),
            Err(Error::Capacity {
                needed: 10,
                available: 9,
                ..
            })
        ));
        assert!(matches!(build_split(&g, &[0, 2], 0), Err(Error::Precondition(_))));
        assert!(matches!(build_split(&g, &[0, 2, 7], 0), Err(Error::Precondition(_))));
        assert!(matches!(build_split(&g, &[0, 0, 2], 0), Err(Error::Precondition(_))));
        // no OOD nodes at all
        let g = labeled_line(&[50, 50, 50]);
        assert!(matches!(build_split(&g, &[0, 1, 2], 0), Err(Error::Capacity { .. })));
    }

    #[test]
    fn remap_is_bijective() {
        let g = labeled_line(&[30, 30, 30, 30, 30, 30]);
        let s = build_split(&g, &[5, 1, 3], 2).unwrap();
        for (k, &orig) in s.id_classes.iter().enumerate() {
            assert_eq!(s.to_id_label(orig), Some(k));
            assert_eq!(s.to_original(k), Some(orig));
        }
        for &orig in &s.ood_classes {
            assert_eq!(s.to_id_label(orig), None);
        }
    }

    #[test]
    fn label_state_partition() {
        let mut st = LabelState::new([1, 2, 3, 4]);
        st.record(2, Answer::Id(0)).unwrap();
        st.record(4, Answer::Unknown).unwrap();
        assert!(st.is_partition_of(&[1, 2, 3, 4]));
        assert!(st.record(2, Answer::Unknown).is_err());
        st.unknown.insert(1);
        assert!(!st.is_partition_of(&[1, 2, 3, 4]));
    }

    struct AllId;
    impl Oracle for AllId {
        fn query(&mut self, _: usize) -> Answer {
            Answer::Id(0)
        }
    }

    #[test]
    fn initial_state_budgets() {
        let g = labeled_line(&[60, 60, 60, 60]);
        let s = build_split(&g, &[0, 1, 2], 3).unwrap();
        let st = init_label_state(&s, 0, 1, &mut AllId).unwrap();
        assert!(st.labeled.is_empty() && st.unknown.is_empty());
        assert_eq!(st.pool.len(), s.pool_nodes.len());
        let st = init_label_state(&s, 15, 1, &mut AllId).unwrap();
        assert_eq!(st.labeled.len(), 15);
        assert!(st.unknown.is_empty());
        assert!(st.is_partition_of(&s.pool_nodes));
        assert!(init_label_state(&s, s.pool_nodes.len() + 1, 1, &mut AllId).is_err());
    }
}
