//! Dataset loading (`.content` / `.cites` text pairs), the synthetic
//! stochastic block model, and the named-dataset registry.
//!
//! A `.content` file has one node per line: `node_id`, the feature values,
//! then the class name, separated by tabs (any whitespace is accepted). A
//! `.cites` file has one `target_id source_id` pair per line. Edges are
//! symmetrized; edges naming an id absent from the content file are skipped.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seed::{self, Stream};

/// A graph read from disk together with the names it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedGraph {
    pub graph: Graph,
    /// Class name for each label index.
    pub class_names: Vec<String>,
    /// Original node id for each node index.
    pub node_ids: Vec<String>,
    pub stats: LoadStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    /// Cites lines naming an id missing from the content file.
    pub skipped_edges: usize,
    pub self_loops: usize,
    /// Edges listed more than once, in either direction.
    pub duplicate_edges: usize,
}

fn fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').map(str::trim).filter(|s| !s.is_empty()).collect()
    } else {
        line.split_whitespace().collect()
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)> + '_> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| Error::io(path, e)))))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a `.content` / `.cites` pair.
///
/// Class names map to indices in order of first appearance, unless
/// `class_order` pins the mapping, in which case every class name must
/// appear in it.
pub fn load_content_cites(
    content_path: &Path,
    cites_path: &Path,
    class_order: Option<&[String]>,
) -> Result<LoadedGraph> {
    let mut class_names: Vec<String> = class_order.map(<[String]>::to_vec).unwrap_or_default();
    let mut class_index: HashMap<String, usize> = class_names.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
    let mut node_ids = Vec::new();
    let mut node_index: HashMap<String, usize> = HashMap::new();
    let mut values: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut n_features: Option<usize> = None;

    for (lineno, line) in open_lines(content_path)? {
        let line = line?;
        let parts = fields(&line);
        if parts.is_empty() {
            continue;
        }
        if parts.len() < 2 {
            return Err(parse_error(content_path, lineno, "expected a node id and a class name"));
        }
        let f = parts.len() - 2;
        match n_features {
            None => n_features = Some(f),
            Some(expected) if expected != f => {
                return Err(Error::Structural(format!(
                    "{}:{lineno}: {f} features, earlier lines have {expected}",
                    content_path.display()
                )));
            }
            Some(_) => {}
        }
        let id = parts[0].to_string();
        if node_index.contains_key(&id) {
            return Err(parse_error(content_path, lineno, format!("duplicate node id {id:?}")));
        }
        for raw in &parts[1..=f] {
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_error(content_path, lineno, format!("bad feature value {raw:?}")))?;
            values.push(v);
        }
        let class = parts[f + 1];
        let label = match class_index.get(class) {
            Some(&c) => c,
            None if class_order.is_some() => {
                return Err(parse_error(
                    content_path,
                    lineno,
                    format!("class {class:?} is not in the pinned class order"),
                ));
            }
            None => {
                class_names.push(class.to_string());
                class_index.insert(class.to_string(), class_names.len() - 1);
                class_names.len() - 1
            }
        };
        labels.push(label);
        node_index.insert(id.clone(), node_ids.len());
        node_ids.push(id);
    }

    let n = node_ids.len();
    let f = n_features.unwrap_or(0);
    let features =
        Array2::from_shape_vec((n, f), values).map_err(|e| Error::Structural(format!("feature matrix: {e}")))?;

    let mut edges = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in open_lines(cites_path)? {
        let line = line?;
        let parts = fields(&line);
        if parts.is_empty() {
            continue;
        }
        if parts.len() != 2 {
            return Err(parse_error(cites_path, lineno, "expected `target_id source_id`"));
        }
        match (node_index.get(parts[0]), node_index.get(parts[1])) {
            (Some(&a), Some(&b)) => edges.push((a, b)),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!(
            "{}: skipped {skipped} edges naming unknown node ids",
            cites_path.display()
        );
    }

    let (graph, edge_stats) = Graph::from_edges(n, &edges, features, labels, class_names.len())?;
    Ok(LoadedGraph {
        graph,
        class_names,
        node_ids,
        stats: LoadStats {
            skipped_edges: skipped,
            self_loops: edge_stats.self_loops,
            duplicate_edges: edge_stats.duplicates,
        },
    })
}

/// Writes `graph` in the `.content` / `.cites` format, one cites line per
/// undirected edge.
pub fn write_content_cites(
    graph: &Graph,
    class_names: &[String],
    node_ids: &[String],
    content_path: &Path,
    cites_path: &Path,
) -> Result<()> {
    if class_names.len() != graph.n_classes_total() || node_ids.len() != graph.n_nodes() {
        return Err(Error::Structural("names do not match the graph".into()));
    }
    let write = |path: &Path, body: &mut dyn FnMut(&mut dyn Write) -> std::io::Result<()>| -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        body(&mut out)
            .and_then(|()| out.flush())
            .map_err(|e| Error::io(path, e))
    };
    write(content_path, &mut |out| {
        for (v, row) in graph.features().rows().into_iter().enumerate() {
            write!(out, "{}", node_ids[v])?;
            for x in row {
                write!(out, "\t{x}")?;
            }
            writeln!(out, "\t{}", class_names[graph.labels()[v]])?;
        }
        Ok(())
    })?;
    write(cites_path, &mut |out| {
        for v in 0..graph.n_nodes() {
            for &u in graph.neighbors(v).iter().filter(|&&u| u > v) {
                writeln!(out, "{}\t{}", node_ids[v], node_ids[u])?;
            }
        }
        Ok(())
    })
}

/// Stochastic block model with Gaussian class-conditional features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmSpec {
    pub classes: usize,
    pub nodes_per_class: usize,
    /// Per-class sizes; overrides `nodes_per_class` when present.
    #[serde(default)]
    pub class_sizes: Option<Vec<usize>>,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_dim: usize,
    pub class_mean_separation: f64,
    pub feature_noise_std: f64,
    pub seed: u64,
}

impl SbmSpec {
    pub fn sizes(&self) -> Vec<usize> {
        self.class_sizes
            .clone()
            .unwrap_or_else(|| vec![self.nodes_per_class; self.classes])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes == 0 {
            return bad("SBM needs at least one class".into());
        }
        if let Some(sizes) = &self.class_sizes {
            if sizes.len() != self.classes {
                return bad(format!("{} class sizes for {} classes", sizes.len(), self.classes));
            }
        }
        if !(self.p_inter >= 0.0 && self.p_intra <= 1.0 && self.p_inter <= self.p_intra) {
            return bad(format!(
                "edge probabilities need 0 <= p_inter <= p_intra <= 1, got {} and {}",
                self.p_inter, self.p_intra
            ));
        }
        if self.p_inter == self.p_intra && self.p_intra != 0.0 {
            return bad("p_intra must exceed p_inter".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        if !(self.feature_noise_std >= 0.0 && self.class_mean_separation.is_finite()) {
            return bad("feature noise and separation must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Samples an SBM graph. Nodes are laid out class by class. Class `k`'s
/// feature mean is `class_mean_separation` times the unit vector `e_k` when
/// `k < feature_dim`, and a random unit direction otherwise.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Graph> {
    spec.validate()?;
    let sizes = spec.sizes();
    let labels: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &s)| std::iter::repeat_n(k, s))
        .collect();
    let n = labels.len();
    let f = spec.feature_dim;

    let mut rng = seed::rng(spec.seed, Stream::Generator, 0);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] {
                spec.p_intra
            } else {
                spec.p_inter
            };
            if p > 0.0 && rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }

    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|k| {
            let mut dir = vec![0.0; f];
            if k < f {
                dir[k] = 1.0;
            } else {
                dir.iter_mut().for_each(|d| *d = standard.sample(&mut rng));
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                dir.iter_mut().for_each(|d| *d /= norm);
            }
            dir.into_iter().map(|d| d * spec.class_mean_separation).collect()
        })
        .collect();
    let mut features = Array2::zeros((n, f));
    for (v, mut row) in features.rows_mut().into_iter().enumerate() {
        for (x, &mu) in row.iter_mut().zip(&means[labels[v]]) {
            *x = mu + spec.feature_noise_std * standard.sample(&mut rng);
        }
    }
    Ok(Graph::from_edges(n, &edges, features, labels, spec.classes)?.0)
}

/// Files and class division for one named dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub content: PathBuf,
    pub cites: PathBuf,
    /// Class names in label-index order.
    pub class_order: Vec<String>,
    pub ood_classes: Vec<usize>,
}

impl DatasetEntry {
    pub fn id_classes(&self) -> Vec<usize> {
        (0..self.class_order.len())
            .filter(|c| !self.ood_classes.contains(c))
            .collect()
    }
}

/// Optional `manifest.json` under the data root; entries replace or extend
/// the built-in registry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub datasets: std::collections::BTreeMap<String, DatasetEntry>,
}

/// Cora class names in the order of the widely distributed planetoid
/// label indices.
pub const CORA_CLASSES: [&str; 7] = [
    "Theory",
    "Reinforcement_Learning",
    "Genetic_Algorithms",
    "Neural_Networks",
    "Probabilistic_Methods",
    "Case_Based",
    "Rule_Learning",
];

struct Builtin {
    name: &'static str,
    dir: &'static str,
    ood: &'static [usize],
}

const BUILTINS: &[Builtin] = &[
    Builtin {
        name: "cora",
        dir: "cora",
        ood: &[0, 1, 3],
    },
    Builtin {
        name: "cora_alt",
        dir: "cora",
        ood: &[0, 5, 6],
    },
    Builtin {
        name: "amazon_computer",
        dir: "amazon_computer",
        ood: &[0, 3, 4, 5, 9],
    },
    Builtin {
        name: "amazon_cs",
        dir: "amazon_computer",
        ood: &[0, 3, 4, 5, 9],
    },
    Builtin {
        name: "amazon_photo",
        dir: "amazon_photo",
        ood: &[1, 6, 7],
    },
    Builtin {
        name: "lastfm_asia",
        dir: "lastfm_asia",
        ood: &[1, 2, 3, 4, 5, 9, 10, 12, 17],
    },
    Builtin {
        name: "lastfm_asia_alt",
        dir: "lastfm_asia",
        ood: &[9, 10, 11, 12, 13, 14, 15, 16, 17],
    },
];

fn builtin_class_order(dir: &str) -> Vec<String> {
    let count = match dir {
        "cora" => return CORA_CLASSES.iter().map(|s| s.to_string()).collect(),
        "amazon_computer" => 10,
        "amazon_photo" => 8,
        "lastfm_asia" => 18,
        _ => unreachable!("unregistered directory {dir}"),
    };
    (0..count).map(|c| c.to_string()).collect()
}

/// Names the registry can resolve with the given manifest.
pub fn known_datasets(manifest: &Manifest) -> Vec<String> {
    let mut names: Vec<String> = BUILTINS.iter().map(|b| b.name.to_string()).collect();
    names.extend(manifest.datasets.keys().cloned());
    names.sort();
    names.dedup();
    names
}

/// Reads `data_root/manifest.json` if it exists.
pub fn read_manifest(data_root: &Path) -> Result<Manifest> {
    let path = data_root.join("manifest.json");
    match fs::read_to_string(&path) {
        Ok(text) => Ok(serde_json::from_str(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Manifest::default()),
        Err(e) => Err(Error::io(&path, e)),
    }
}

/// Resolves a dataset name to its files and class division. Relative
/// manifest paths are taken from `data_root`.
///
/// Built-in entries expect `data_root/<dir>/<dir>.content` and `.cites`.
/// Cora uses the planetoid class order; the other datasets are expected to
/// be converted with class names equal to their integer label indices.
pub fn dataset_entry(name: &str, data_root: &Path) -> Result<DatasetEntry> {
    let manifest = read_manifest(data_root)?;
    if let Some(entry) = manifest.datasets.get(name) {
        let mut entry = entry.clone();
        entry.content = data_root.join(&entry.content);
        entry.cites = data_root.join(&entry.cites);
        return Ok(entry);
    }
    let builtin = BUILTINS
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| Error::UnknownDataset {
            name: name.to_string(),
            known: known_datasets(&manifest).join(", "),
        })?;
    let dir = data_root.join(builtin.dir);
    Ok(DatasetEntry {
        content: dir.join(format!("{}.content", builtin.dir)),
        cites: dir.join(format!("{}.cites", builtin.dir)),
        class_order: builtin_class_order(builtin.dir),
        ood_classes: builtin.ood.to_vec(),
    })
}

/// Loads a named dataset and returns it with its ID classes.
pub fn dataset_registry(name: &str, data_root: &Path) -> Result<(LoadedGraph, Vec<usize>)> {
    let entry = dataset_entry(name, data_root)?;
    let loaded = load_content_cites(&entry.content, &entry.cites, Some(&entry.class_order))?;
    Ok((loaded, entry.id_classes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, per_class: usize, p_intra: f64, p_inter: f64) -> SbmSpec {
        SbmSpec {
            classes,
            nodes_per_class: per_class,
            class_sizes: None,
            p_intra,
            p_inter,
            feature_dim: 4,
            class_mean_separation: 1.0,
            feature_noise_std: 0.5,
            seed: 7,
        }
    }

    #[test]
    fn sbm_extremes() {
        let g = generate_sbm(&spec(2, 5, 0.0, 0.0)).unwrap();
        assert_eq!(g.n_directed_edges(), 0);
        let g = generate_sbm(&spec(2, 3, 1.0, 0.0)).unwrap();
        assert_eq!(g.n_directed_edges(), 12);
        for v in 0..6 {
            let mut expected: Vec<usize> = if v < 3 { vec![0, 1, 2] } else { vec![3, 4, 5] };
            expected.retain(|&u| u != v);
            assert_eq!(g.neighbors(v), expected.as_slice());
        }
    }

    #[test]
    fn sbm_rejects_bad_specs() {
        assert!(generate_sbm(&spec(2, 3, 0.1, 0.2)).is_err());
        assert!(generate_sbm(&SbmSpec {
            feature_dim: 0,
            ..spec(2, 3, 0.2, 0.1)
        })
        .is_err());
        assert!(generate_sbm(&SbmSpec {
            class_sizes: Some(vec![1]),
            ..spec(2, 3, 0.2, 0.1)
        })
        .is_err());
    }

    #[test]
    fn sbm_class_sizes() {
        let g = generate_sbm(&SbmSpec {
            class_sizes: Some(vec![2, 5, 1]),
            ..spec(3, 0, 0.5, 0.1)
        })
        .unwrap();
        assert_eq!(g.class_counts(), vec![2, 5, 1]);
    }

    #[test]
    fn registry_divisions() {
        let root = Path::new("/nonexistent");
        let cora = dataset_entry("cora", root).unwrap();
        assert_eq!(cora.ood_classes, vec![0, 1, 3]);
        assert_eq!(cora.id_classes(), vec![2, 4, 5, 6]);
        assert_eq!(dataset_entry("cora_alt", root).unwrap().id_classes(), vec![1, 2, 3, 4]);
        let lastfm = dataset_entry("lastfm_asia", root).unwrap();
        assert_eq!((lastfm.class_order.len(), lastfm.ood_classes.len()), (18, 9));
        assert_eq!(
            dataset_entry("lastfm_asia_alt", root).unwrap().id_classes(),
            (0..9).collect::<Vec<_>>()
        );
        match dataset_entry("citeseer", root) {
            Err(Error::UnknownDataset { known, .. }) => assert!(known.contains("cora")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
