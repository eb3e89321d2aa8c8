//! Persisted human-annotation sessions.
//!
//! A session directory holds two files:
//!
//! - `session.json`: the configuration, split and loop progress, rewritten
//!   atomically whenever the loop advances;
//! - `annotations.jsonl`: every accepted answer, appended and synced before
//!   it is acknowledged.
//!
//! Reopening a session loads the snapshot and replays logged answers for the
//! pending batch, so no acknowledged answer is lost and none is applied
//! twice.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::active::{Experiment, ExperimentConfig, ExperimentProgress, Step};
use crate::config::{materialize, DatasetSource, RunConfig};
use crate::error::{Error, Result};
use crate::graph::OpenSetSplit;
use crate::oracle::Answer;
use crate::report::{summary_table, test_scores, write_run_log, write_scores, RunSummary};

pub const SNAPSHOT_FILE: &str = "session.json";
pub const LOG_FILE: &str = "annotations.jsonl";
const SNAPSHOT_VERSION: u32 = 1;

/// What a session runs: one dataset, one strategy, one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub dataset: DatasetSource,
    pub data_root: PathBuf,
    #[serde(default)]
    pub id_classes: Option<Vec<usize>>,
    pub normalize_features: bool,
    pub experiment: ExperimentConfig,
    pub seed: u64,
}

impl SessionSpec {
    /// The first cell of a run configuration's matrix.
    pub fn from_run_config(config: &RunConfig, seed_offset: u64) -> Result<Self> {
        let run = config
            .plan(seed_offset)
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config("configuration has no runs".into()))?;
        if run.experiment.id_only_seeding {
            return Err(Error::Config(
                "ID-only seeding is unavailable with a human oracle".into(),
            ));
        }
        Ok(Self {
            normalize_features: config.should_normalize(&run.dataset),
            dataset: run.dataset,
            data_root: config.data_root.clone(),
            id_classes: config.id_classes.clone(),
            experiment: run.experiment,
            seed: run.seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    spec: SessionSpec,
    class_names: Vec<String>,
    split: OpenSetSplit,
    progress: ExperimentProgress,
}

/// One accepted answer as stored in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub node_id: usize,
    pub round: usize,
    pub answer: Answer,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub annotator: String,
}

/// A human-annotation session bound to its directory.
#[derive(Debug)]
pub struct Session {
    dir: PathBuf,
    spec: SessionSpec,
    class_names: Vec<String>,
    experiment: Experiment,
    log: File,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let mut file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes)
        .and_then(|()| file.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn open_log(dir: &Path) -> Result<File> {
    let path = dir.join(LOG_FILE);
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))
}

/// Drops a torn final record so later appends start on a fresh line.
fn repair_log(dir: &Path) -> Result<()> {
    let path = dir.join(LOG_FILE);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    if bytes.last().is_none_or(|&b| b == b'\n') {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    log::warn!(
        "{}: dropping {} bytes of a torn record",
        path.display(),
        bytes.len() - keep
    );
    let file = OpenOptions::new()
        .write(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    file.set_len(keep as u64)
        .and_then(|()| file.sync_all())
        .map_err(|e| Error::io(&path, e))
}

impl Session {
    /// Starts a new session in `dir`, which must not already hold one.
    pub fn create(dir: &Path, spec: SessionSpec) -> Result<Self> {
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        if snapshot_path.exists() {
            return Err(Error::Precondition(format!(
                "{} already holds a session",
                dir.display()
            )));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let dataset = materialize(
            &spec.dataset,
            &spec.data_root,
            spec.id_classes.as_deref(),
            spec.normalize_features,
        )?;
        let problem = dataset.problem(spec.seed)?;
        let experiment = Experiment::new(problem, spec.experiment.clone(), spec.seed, None)?;
        let session = Self {
            dir: dir.to_path_buf(),
            class_names: dataset.id_class_names(),
            spec,
            experiment,
            log: open_log(dir)?,
        };
        session.write_snapshot()?;
        Ok(session)
    }

    /// Reopens the session in `dir`, replaying logged answers that the
    /// snapshot does not yet contain.
    pub fn open(dir: &Path) -> Result<Self> {
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let text = fs::read_to_string(&snapshot_path).map_err(|e| Error::io(&snapshot_path, e))?;
        let snapshot: Snapshot = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: snapshot_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(Error::Structural(format!(
                "unsupported session version {}",
                snapshot.version
            )));
        }
        let spec = snapshot.spec;
        let dataset = materialize(
            &spec.dataset,
            &spec.data_root,
            spec.id_classes.as_deref(),
            spec.normalize_features,
        )?;
        let problem = dataset.problem(spec.seed)?;
        if problem.split != snapshot.split {
            return Err(Error::Structural(
                "dataset no longer reproduces the session's split".into(),
            ));
        }
        let experiment = Experiment::resume(
            Arc::clone(&problem),
            spec.experiment.clone(),
            spec.seed,
            snapshot.progress,
        )?;
        repair_log(dir)?;
        let mut session = Self {
            dir: dir.to_path_buf(),
            spec,
            class_names: snapshot.class_names,
            experiment,
            log: open_log(dir)?,
        };
        session.replay_log()?;
        Ok(session)
    }

    fn replay_log(&mut self) -> Result<()> {
        let path = self.dir.join(LOG_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut replayed = 0;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: AnnotationRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(_) => {
                    log::warn!("{}:{}: ignoring unreadable annotation record", path.display(), i + 1);
                    continue;
                }
            };
            let is_pending_round = self.experiment.pending().is_some_and(|p| p.round == record.round);
            if is_pending_round && self.experiment.check_answer(record.node_id, record.answer).is_ok() {
                self.experiment.answer(record.node_id, record.answer)?;
                replayed += 1;
            }
        }
        if replayed > 0 {
            log::info!("replayed {replayed} logged answers");
        }
        Ok(())
    }

    fn write_snapshot(&self) -> Result<()> {
        let snapshot = Snapshot {
            version: SNAPSHOT_VERSION,
            spec: self.spec.clone(),
            class_names: self.class_names.clone(),
            split: self.experiment.problem().split.clone(),
            progress: self.experiment.progress().clone(),
        };
        write_atomic(
            &self.dir.join(SNAPSHOT_FILE),
            serde_json::to_string(&snapshot)?.as_bytes(),
        )
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn spec(&self) -> &SessionSpec {
        &self.spec
    }

    /// ID class names in ID-label order.
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn experiment(&self) -> &Experiment {
        &self.experiment
    }

    /// Run identifier in the same form as matrix runs.
    pub fn run_id(&self) -> String {
        format!(
            "{}__{}__seed{}",
            self.spec.dataset.label(),
            self.spec.experiment.label(),
            self.spec.seed
        )
    }

    /// Once finished, writes `runs/<run>.jsonl`, `summary.tsv` and, when
    /// the final model is in memory, `scores/<run>.tsv` into the session
    /// directory, in the same formats as a matrix run.
    pub fn write_report(&self) -> Result<Option<RunSummary>> {
        if !self.experiment.is_finished() {
            return Ok(None);
        }
        let outcome = self.experiment.outcome();
        let summary = RunSummary::new(
            self.run_id(),
            self.spec.dataset.label(),
            self.spec.experiment.label(),
            self.spec.seed,
            &outcome,
        );
        for sub in ["runs", "scores"] {
            let path = self.dir.join(sub);
            fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        }
        write_run_log(
            &self.dir.join("runs").join(format!("{}.jsonl", summary.run)),
            &outcome.reports,
            &summary,
        )?;
        if let Some(model) = &outcome.final_model {
            let problem = self.experiment.problem();
            let scores = model.ood_scores(&problem.graph, &problem.adj)?;
            write_scores(
                &self.dir.join("scores").join(format!("{}.tsv", summary.run)),
                &test_scores(problem, &scores),
            )?;
        }
        let path = self.dir.join("summary.tsv");
        fs::write(&path, summary_table(std::slice::from_ref(&summary))).map_err(|e| Error::io(&path, e))?;
        Ok(Some(summary))
    }

    /// Validates, logs durably, then records an answer.
    pub fn submit(&mut self, node: usize, answer: Answer, annotator: &str) -> Result<()> {
        self.experiment.check_answer(node, answer)?;
        let round = self.experiment.pending().map_or(0, |p| p.round);
        let record = AnnotationRecord {
            node_id: node,
            round,
            answer,
            timestamp: now_ms(),
            annotator: annotator.to_string(),
        };
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        let path = self.dir.join(LOG_FILE);
        self.log
            .write_all(line.as_bytes())
            .and_then(|()| self.log.sync_data())
            .map_err(|e| Error::io(&path, e))?;
        self.experiment.answer(node, answer)?;
        Ok(())
    }

    /// True when every pending node has an answer.
    pub fn batch_complete(&self) -> bool {
        self.experiment.pending().is_some_and(|p| p.is_complete())
    }

    /// Applies a completed batch, plans the next one (or finishes), and
    /// snapshots the result.
    pub fn advance(&mut self) -> Result<Step> {
        let step = self.experiment.advance()?;
        self.write_snapshot()?;
        Ok(step)
    }

    /// Advances while batches are complete; returns whether the session is
    /// finished.
    pub fn advance_if_complete(&mut self) -> Result<bool> {
        while self.batch_complete() {
            if self.advance()? == Step::Finished {
                break;
            }
        }
        Ok(self.experiment.is_finished())
    }
}
