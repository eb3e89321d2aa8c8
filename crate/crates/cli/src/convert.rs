//! Conversion of tabular graph datasets into `.content` / `.cites` pairs.
//!
//! Inputs:
//!
//! - edges: CSV of `source,target` node ids;
//! - labels: CSV of `node,label`; defines the node set and its order;
//! - features, one of
//!   - CSV of `node,f0,f1,...`, or
//!   - JSON object mapping each node id to a list of active feature
//!     indices (binary bag-of-features).
//!
//! Class names are the distinct label strings, in numeric order when every
//! label is an integer and in lexicographic order otherwise.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use gosl_core::datasets::{write_content_cites, SbmSpec};
use gosl_core::graph::Graph;
use ndarray::Array2;

pub enum Features<'a> {
    Csv(&'a Path),
    IndexJson(&'a Path),
}

pub struct TabularInput<'a> {
    pub edges: &'a Path,
    pub labels: &'a Path,
    pub features: Features<'a>,
    pub has_headers: bool,
}

/// What a conversion produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvertReport {
    pub nodes: usize,
    pub features: usize,
    pub classes: Vec<String>,
    pub edges: usize,
    pub skipped_edges: usize,
}

fn reader(path: &Path, has_headers: bool) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))
}

fn class_order(labels: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&String> = labels.iter().collect();
    let mut classes: Vec<String> = distinct.into_iter().cloned().collect();
    if classes.iter().all(|c| c.parse::<i64>().is_ok()) {
        classes.sort_by_key(|c| c.parse::<i64>().expect("checked above"));
    }
    classes
}

fn read_features_csv(path: &Path, has_headers: bool, index: &HashMap<String, usize>) -> Result<Array2<f64>> {
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; index.len()];
    let mut width = None;
    for (i, record) in reader(path, has_headers)?.records().enumerate() {
        let record = record.with_context(|| format!("{}: record {}", path.display(), i + 1))?;
        let Some(&v) = record.get(0).and_then(|id| index.get(id)) else {
            continue;
        };
        let values = record
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}: record {}: bad feature value", path.display(), i + 1))?;
        if *width.get_or_insert(values.len()) != values.len() {
            bail!(
                "{}: record {} has {} features, expected {}",
                path.display(),
                i + 1,
                values.len(),
                width.unwrap()
            );
        }
        rows[v] = Some(values);
    }
    let width = width.unwrap_or(0);
    let mut out = Array2::zeros((index.len(), width));
    for (v, row) in rows.into_iter().enumerate() {
        let row = row.with_context(|| format!("{}: no features for node index {v}", path.display()))?;
        out.row_mut(v).assign(&ndarray::Array1::from(row));
    }
    Ok(out)
}

fn read_features_json(path: &Path, index: &HashMap<String, usize>) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let map: HashMap<String, Vec<usize>> = serde_json::from_str(&text)
        .with_context(|| format!("{}: expected an object of index lists", path.display()))?;
    let width = map.values().flatten().max().map_or(0, |m| m + 1);
    let mut out = Array2::zeros((index.len(), width));
    for (id, active) in &map {
        if let Some(&v) = index.get(id) {
            for &j in active {
                out[[v, j]] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Converts a tabular dataset and writes `<out_dir>/<name>.content` and
/// `<out_dir>/<name>.cites`.
pub fn convert_tabular(input: &TabularInput<'_>, out_dir: &Path, name: &str) -> Result<ConvertReport> {
    let mut ids = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, record) in reader(input.labels, input.has_headers)?.records().enumerate() {
        let record = record.with_context(|| format!("{}: record {}", input.labels.display(), i + 1))?;
        match (record.get(0), record.get(1)) {
            (Some(id), Some(label)) => {
                ids.push(id.to_string());
                raw_labels.push(label.to_string());
            }
            _ => bail!(
                "{}: record {} needs node and label columns",
                input.labels.display(),
                i + 1
            ),
        }
    }
    let index: HashMap<String, usize> = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    if index.len() != ids.len() {
        bail!("{}: node ids are not unique", input.labels.display());
    }
    let classes = class_order(&raw_labels);
    let class_index: HashMap<&String, usize> = classes.iter().enumerate().map(|(k, c)| (c, k)).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|l| class_index[l]).collect();

    let features = match input.features {
        Features::Csv(path) => read_features_csv(path, input.has_headers, &index)?,
        Features::IndexJson(path) => read_features_json(path, &index)?,
    };

    let mut edges = Vec::new();
    let mut skipped = 0;
    for (i, record) in reader(input.edges, input.has_headers)?.records().enumerate() {
        let record = record.with_context(|| format!("{}: record {}", input.edges.display(), i + 1))?;
        match (
            record.get(0).and_then(|a| index.get(a)),
            record.get(1).and_then(|b| index.get(b)),
        ) {
            (Some(&a), Some(&b)) => edges.push((a, b)),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!(
            "{}: skipped {skipped} edges naming unknown nodes",
            input.edges.display()
        );
    }
    let (graph, _) = Graph::from_edges(ids.len(), &edges, features, labels, classes.len())?;
    write_pair(&graph, &classes, &ids, out_dir, name)?;
    Ok(ConvertReport {
        nodes: graph.n_nodes(),
        features: graph.n_features(),
        classes,
        edges: graph.n_directed_edges() / 2,
        skipped_edges: skipped,
    })
}

/// Generates an SBM graph from a JSON spec and writes it as a pair.
pub fn convert_sbm(spec_path: &Path, out_dir: &Path, name: &str) -> Result<ConvertReport> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("cannot read {}", spec_path.display()))?;
    let spec: SbmSpec =
        serde_json::from_str(&text).with_context(|| format!("{}: invalid SBM spec", spec_path.display()))?;
    let graph = gosl_core::datasets::generate_sbm(&spec)?;
    let classes: Vec<String> = (0..spec.classes).map(|c| c.to_string()).collect();
    let ids: Vec<String> = (0..graph.n_nodes()).map(|v| v.to_string()).collect();
    write_pair(&graph, &classes, &ids, out_dir, name)?;
    Ok(ConvertReport {
        nodes: graph.n_nodes(),
        features: graph.n_features(),
        classes,
        edges: graph.n_directed_edges() / 2,
        skipped_edges: 0,
    })
}

fn write_pair(graph: &Graph, classes: &[String], ids: &[String], out_dir: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    write_content_cites(
        graph,
        classes,
        ids,
        &out_dir.join(format!("{name}.content")),
        &out_dir.join(format!("{name}.cites")),
    )?;
    Ok(())
}
