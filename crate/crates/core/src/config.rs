//! Run configuration: the JSON experiment matrix and how its datasets are
//! materialized.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::active::{BudgetConfig, ExperimentConfig, Problem, Strategy, Variant};
use crate::datasets::{dataset_entry, generate_sbm, load_content_cites, LoadedGraph, SbmSpec};
use crate::error::{Error, Result};
use crate::graph::{build_split, Graph};
use crate::models::TrainConfig;

/// Where a graph comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    /// A registry name such as `cora`.
    Named(String),
    Sbm {
        sbm: SbmSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Files {
        content: PathBuf,
        cites: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        class_order: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
}

impl DatasetSource {
    pub fn label(&self) -> String {
        match self {
            DatasetSource::Named(n) => n.clone(),
            DatasetSource::Sbm { name, .. } => name.clone().unwrap_or_else(|| "sbm".into()),
            DatasetSource::Files { name, content, .. } => name.clone().unwrap_or_else(|| {
                content
                    .file_stem()
                    .map_or_else(|| "files".into(), |s| s.to_string_lossy().into_owned())
            }),
        }
    }

    fn is_file_backed(&self) -> bool {
        !matches!(self, DatasetSource::Sbm { .. })
    }
}

/// One dataset or a list of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(DatasetSource),
    Many(Vec<DatasetSource>),
}

impl OneOrMany {
    pub fn to_vec(&self) -> Vec<DatasetSource> {
        match self {
            OneOrMany::One(d) => vec![d.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// The experiment matrix: datasets × strategies × variants × seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: OneOrMany,
    /// Root for registry datasets and relative file paths.
    #[serde(default = "default_data_root")]
    pub data_root: PathBuf,
    /// Original class indices treated as ID; required for non-registry
    /// datasets.
    #[serde(default)]
    pub id_classes: Option<Vec<usize>>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_w_unknown")]
    pub w_unknown: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Number of K-Medoids clusters.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_kmedoids_max_iters")]
    pub kmedoids_max_iters: usize,
    #[serde(default)]
    pub budget: BudgetConfig,
    /// Scale feature rows to unit L1 norm. Defaults to on for file-backed
    /// datasets and off for SBM graphs.
    #[serde(default)]
    pub normalize_features: Option<bool>,
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default)]
    pub id_only_seeding: bool,
    #[serde(default = "default_true")]
    pub precision_includes_initial: bool,
    #[serde(default)]
    pub evaluate_rounds: bool,
}

fn default_data_root() -> PathBuf {
    PathBuf::from("data")
}
fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Lego]
}
fn default_variants() -> Vec<Variant> {
    vec![Variant::Full]
}
fn default_w_unknown() -> f64 {
    ExperimentConfig::default().w_unknown
}
fn default_hidden() -> usize {
    TrainConfig::default().hidden
}
fn default_lr() -> f64 {
    TrainConfig::default().lr
}
fn default_dropout() -> f64 {
    TrainConfig::default().dropout
}
fn default_weight_decay() -> f64 {
    TrainConfig::default().weight_decay
}
fn default_epochs() -> usize {
    TrainConfig::default().epochs
}
fn default_m() -> usize {
    ExperimentConfig::default().clusters
}
fn default_kmedoids_max_iters() -> usize {
    ExperimentConfig::default().kmedoids_max_iters
}
fn default_true() -> bool {
    true
}

const TOP_LEVEL_KEYS: &[&str] = &[
    "dataset",
    "data_root",
    "id_classes",
    "seeds",
    "strategies",
    "variants",
    "w_unknown",
    "hidden",
    "lr",
    "dropout",
    "weight_decay",
    "epochs",
    "m",
    "kmedoids_max_iters",
    "budget",
    "normalize_features",
    "warm_start",
    "id_only_seeding",
    "precision_includes_initial",
    "evaluate_rounds",
];
const BUDGET_KEYS: &[&str] = &["initial", "per_round", "total"];
const SBM_SOURCE_KEYS: &[&str] = &["sbm", "name"];
const FILE_SOURCE_KEYS: &[&str] = &["content", "cites", "class_order", "name"];
const SBM_KEYS: &[&str] = &[
    "classes",
    "nodes_per_class",
    "class_sizes",
    "p_intra",
    "p_inter",
    "feature_dim",
    "class_mean_separation",
    "feature_noise_std",
    "seed",
];

fn collect_unknown(value: &Value, allowed: &[&str], prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(map) = value {
        for key in map.keys().filter(|k| !allowed.contains(&k.as_str())) {
            out.push(format!("{prefix}{key}"));
        }
    }
}

/// Dotted paths of every key the configuration schema does not know.
pub fn unknown_keys(value: &Value) -> Vec<String> {
    let mut out = Vec::new();
    collect_unknown(value, TOP_LEVEL_KEYS, "", &mut out);
    if let Some(budget) = value.get("budget") {
        collect_unknown(budget, BUDGET_KEYS, "budget.", &mut out);
    }
    let sources: Vec<&Value> = match value.get("dataset") {
        Some(Value::Array(items)) => items.iter().collect(),
        Some(v) => vec![v],
        None => vec![],
    };
    for (i, source) in sources.into_iter().enumerate() {
        let prefix = if value.get("dataset").is_some_and(Value::is_array) {
            format!("dataset[{i}].")
        } else {
            "dataset.".to_string()
        };
        if let Some(sbm) = source.get("sbm") {
            collect_unknown(source, SBM_SOURCE_KEYS, &prefix, &mut out);
            collect_unknown(sbm, SBM_KEYS, &format!("{prefix}sbm."), &mut out);
        } else if source.is_object() {
            collect_unknown(source, FILE_SOURCE_KEYS, &prefix, &mut out);
        }
    }
    out
}

impl RunConfig {
    /// Parses and validates a JSON configuration. Unknown keys are reported
    /// all at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let unknown = unknown_keys(&value);
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown configuration keys: {}",
                unknown.join(", ")
            )));
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json(&text)?;
        if config.data_root.is_relative() {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                config.data_root = parent.join(&config.data_root);
            }
        }
        Ok(config)
    }

    /// The configuration with every default written out.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.strategies.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("strategies and variants must be non-empty".into()));
        }
        let datasets = self.dataset.to_vec();
        if datasets.is_empty() {
            return Err(Error::Config("at least one dataset is required".into()));
        }
        for d in &datasets {
            if !matches!(d, DatasetSource::Named(_)) && self.id_classes.is_none() {
                return Err(Error::Config(format!(
                    "dataset {} needs explicit id_classes",
                    d.label()
                )));
            }
            if let DatasetSource::Sbm { sbm, .. } = d {
                sbm.validate()?;
            }
        }
        for strategy in &self.strategies {
            for variant in &self.variants {
                if *strategy == Strategy::Lego || *variant == Variant::Full {
                    self.experiment(*strategy, *variant).validate()?;
                }
            }
        }
        Ok(())
    }

    /// Per-run experiment settings for one strategy and variant.
    pub fn experiment(&self, strategy: Strategy, variant: Variant) -> ExperimentConfig {
        ExperimentConfig {
            strategy,
            variant,
            w_unknown: self.w_unknown,
            clusters: self.m,
            kmedoids_max_iters: self.kmedoids_max_iters,
            train: TrainConfig {
                hidden: self.hidden,
                lr: self.lr,
                dropout: self.dropout,
                weight_decay: self.weight_decay,
                epochs: self.epochs,
            },
            budget: self.budget,
            warm_start: self.warm_start,
            id_only_seeding: self.id_only_seeding,
            precision_includes_initial: self.precision_includes_initial,
            evaluate_rounds: self.evaluate_rounds,
        }
    }

    /// Strategy configurations in the matrix. Ablation variants apply only
    /// to the lego strategy; other strategies run once each.
    pub fn experiments(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &strategy in &self.strategies {
            if strategy == Strategy::Lego {
                out.extend(self.variants.iter().map(|&v| self.experiment(strategy, v)));
            } else {
                out.push(self.experiment(strategy, Variant::Full));
            }
        }
        out
    }

    /// Every (dataset, experiment, seed) cell, with `seed_offset` added to
    /// each seed.
    pub fn plan(&self, seed_offset: u64) -> Vec<RunSpec> {
        let mut runs = Vec::new();
        for (dataset_index, dataset) in self.dataset.to_vec().into_iter().enumerate() {
            for experiment in self.experiments() {
                for &seed in &self.seeds {
                    runs.push(RunSpec {
                        dataset_index,
                        dataset: dataset.clone(),
                        experiment: experiment.clone(),
                        seed: seed.wrapping_add(seed_offset),
                    });
                }
            }
        }
        runs
    }

    pub fn should_normalize(&self, source: &DatasetSource) -> bool {
        self.normalize_features.unwrap_or(source.is_file_backed())
    }

    /// Named preset configurations.
    pub fn preset(name: &str) -> Result<Self> {
        let json = match name {
            "reproduce-cora" => {
                r#"{"dataset": "cora", "seeds": [0,1,2,3,4,5,6,7,8,9], "strategies": ["lego", "random"]}"#
            }
            "ablate-cora" => {
                r#"{"dataset": "cora", "seeds": [0,1,2,3,4,5,6,7,8,9], "variants": ["full", "no_filter", "no_cluster"]}"#
            }
            "sbm-smoke" => {
                r#"{"dataset": {"sbm": {"classes": 5, "nodes_per_class": 80, "class_sizes": [67, 67, 66, 100, 100],
                    "p_intra": 0.05, "p_inter": 0.005, "feature_dim": 16, "class_mean_separation": 1.0,
                    "feature_noise_std": 1.0, "seed": 0}, "name": "sbm5"},
                    "id_classes": [0, 1, 2], "seeds": [0]}"#
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; known presets: reproduce-cora, ablate-cora, sbm-smoke"
                )))
            }
        };
        Self::from_json(json)
    }
}

/// One cell of the experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub dataset_index: usize,
    pub dataset: DatasetSource,
    pub experiment: ExperimentConfig,
    pub seed: u64,
}

impl RunSpec {
    /// File-name-safe run identifier.
    pub fn id(&self) -> String {
        format!(
            "{}__{}__seed{}",
            self.dataset.label(),
            self.experiment.label(),
            self.seed
        )
    }
}

/// A graph with its class names and the default ID classes.
#[derive(Debug, Clone)]
pub struct MaterializedDataset {
    pub graph: Graph,
    pub class_names: Vec<String>,
    pub id_classes: Vec<usize>,
}

impl MaterializedDataset {
    /// Builds the per-seed problem (split depends on the seed).
    pub fn problem(&self, seed: u64) -> Result<Arc<Problem>> {
        let split = build_split(&self.graph, &self.id_classes, seed)?;
        Ok(Arc::new(Problem::new(self.graph.clone(), split)?))
    }

    /// Names of the ID classes in ID-label order.
    pub fn id_class_names(&self) -> Vec<String> {
        self.id_classes.iter().map(|&c| self.class_names[c].clone()).collect()
    }
}

/// Loads or generates a dataset. `id_classes` overrides the registry
/// division.
pub fn materialize(
    source: &DatasetSource,
    data_root: &Path,
    id_classes: Option<&[usize]>,
    normalize: bool,
) -> Result<MaterializedDataset> {
    let (loaded, default_ids) = match source {
        DatasetSource::Named(name) => {
            let entry = dataset_entry(name, data_root)?;
            let loaded = load_content_cites(&entry.content, &entry.cites, Some(&entry.class_order))?;
            (loaded, Some(entry.id_classes()))
        }
        DatasetSource::Sbm { sbm, .. } => {
            let graph = generate_sbm(sbm)?;
            let n = graph.n_nodes();
            let loaded = LoadedGraph {
                class_names: (0..sbm.classes).map(|c| format!("class_{c}")).collect(),
                node_ids: (0..n).map(|v| v.to_string()).collect(),
                graph,
                stats: Default::default(),
            };
            (loaded, None)
        }
        DatasetSource::Files {
            content,
            cites,
            class_order,
            ..
        } => {
            let loaded = load_content_cites(&data_root.join(content), &data_root.join(cites), class_order.as_deref())?;
            (loaded, None)
        }
    };
    let id_classes = match (id_classes, default_ids) {
        (Some(ids), _) => ids.to_vec(),
        (None, Some(ids)) => ids,
        (None, None) => {
            return Err(Error::Config(format!(
                "dataset {} needs explicit id_classes",
                source.label()
            )))
        }
    };
    let graph = if normalize {
        loaded.graph.with_row_normalized_features()
    } else {
        loaded.graph
    };
    Ok(MaterializedDataset {
        graph,
        class_names: loaded.class_names,
        id_classes,
    })
}
