mod common;

use std::fs::OpenOptions;
use std::io::Write;

use gosl_core::active::run_simulated;
use gosl_core::config::{materialize, DatasetSource};
use gosl_core::datasets::SbmSpec;
use gosl_core::oracle::{Answer, SimulatedOracle};
use gosl_core::session::{AnnotationRecord, Session, SessionSpec, LOG_FILE};
use gosl_core::Error;

fn spec() -> SessionSpec {
    SessionSpec {
        dataset: DatasetSource::Sbm {
            sbm: SbmSpec {
                classes: 4,
                nodes_per_class: 60,
                class_sizes: None,
                p_intra: 0.1,
                p_inter: 0.01,
                feature_dim: 6,
                class_mean_separation: 1.5,
                feature_noise_std: 1.0,
                seed: 3,
            },
            name: Some("tiny".into()),
        },
        data_root: "data".into(),
        id_classes: Some(vec![0, 1, 2]),
        normalize_features: false,
        experiment: common::fast_config(),
        seed: 7,
    }
}

fn truth(spec: &SessionSpec) -> SimulatedOracle {
    let dataset = materialize(
        &spec.dataset,
        &spec.data_root,
        spec.id_classes.as_deref(),
        spec.normalize_features,
    )
    .unwrap();
    let problem = dataset.problem(spec.seed).unwrap();
    SimulatedOracle::new(&problem.graph, &problem.split)
}

fn log_lines(dir: &std::path::Path) -> Vec<AnnotationRecord> {
    std::fs::read_to_string(dir.join(LOG_FILE))
        .unwrap()
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

/// Kills the session (drops it without advancing) at several points,
/// including mid-batch and with a torn final log line, and checks the
/// resumed session loses and duplicates nothing and ends where the
/// simulated run ends.
#[test]
fn crash_and_resume_matches_simulated_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state");
    let spec = spec();
    let oracle = truth(&spec);
    let mut session = Session::create(&path, spec.clone()).unwrap();
    let mut acknowledged = 0usize;
    let mut crashes = 0;
    loop {
        let pending: Vec<usize> = session.experiment().pending().unwrap().unanswered().collect();
        let half = pending.len() / 2;
        for (i, &v) in pending.iter().enumerate() {
            session.submit(v, oracle.peek(v), "tester").unwrap();
            acknowledged += 1;
            if i + 1 == half {
                drop(session);
                crashes += 1;
                if crashes % 2 == 0 {
                    let mut log = OpenOptions::new().append(true).open(path.join(LOG_FILE)).unwrap();
                    log.write_all(br#"{"node_id": 12, "rou"#).unwrap();
                }
                session = Session::open(&path).unwrap();
                let pending = session.experiment().pending().unwrap();
                assert_eq!(pending.answers.len(), half, "answers lost or duplicated on resume");
            }
        }
        if session.advance_if_complete().unwrap() {
            break;
        }
        if crashes % 3 == 0 {
            drop(session);
            session = Session::open(&path).unwrap();
        }
    }
    assert!(crashes >= 5);

    let records = log_lines(&path);
    assert_eq!(records.len(), acknowledged);
    let mut nodes: Vec<usize> = records.iter().map(|r| r.node_id).collect();
    nodes.sort_unstable();
    nodes.dedup();
    assert_eq!(nodes.len(), acknowledged);

    let dataset = materialize(&spec.dataset, &spec.data_root, spec.id_classes.as_deref(), false).unwrap();
    let reference = run_simulated(dataset.problem(spec.seed).unwrap(), &spec.experiment, spec.seed).unwrap();
    let progress = session.experiment().progress();
    assert_eq!(
        common::without_timing(&progress.reports),
        common::without_timing(&reference.reports)
    );
    assert_eq!(progress.final_eval, reference.final_eval);
    assert_eq!(acknowledged, reference.annotations());

    let reopened = Session::open(&path).unwrap();
    assert!(reopened.experiment().is_finished());
    assert_eq!(reopened.experiment().progress(), progress);
}

#[test]
fn rejected_answers_are_not_logged() {
    let dir = tempfile::tempdir().unwrap();
    let mut session = Session::create(dir.path(), spec()).unwrap();
    let v = session.experiment().pending().unwrap().nodes[0];
    assert!(matches!(session.submit(v, Answer::Id(9), "x"), Err(Error::Rejected(_))));
    session.submit(v, Answer::Unknown, "x").unwrap();
    assert!(matches!(session.submit(v, Answer::Id(0), "x"), Err(Error::Rejected(_))));
    assert_eq!(log_lines(dir.path()).len(), 1);
    assert!(!session.batch_complete());
    assert!(session.advance().is_err());
}

#[test]
fn create_and_open_errors() {
    let dir = tempfile::tempdir().unwrap();
    Session::create(dir.path(), spec()).unwrap();
    assert!(Session::create(dir.path(), spec()).is_err());
    let missing = dir.path().join("nowhere");
    let err = Session::open(&missing).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("nowhere"), "{err}");
}

#[test]
fn human_sessions_refuse_id_only_seeding() {
    let mut config = gosl_core::config::RunConfig::preset("sbm-smoke").unwrap();
    config.id_only_seeding = true;
    assert!(SessionSpec::from_run_config(&config, 0).is_err());
    config.id_only_seeding = false;
    let spec = SessionSpec::from_run_config(&config, 2).unwrap();
    assert_eq!(spec.seed, 2);
    assert!(!spec.normalize_features);
}

#[test]
fn finished_session_writes_the_run_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec();
    let oracle = truth(&spec);
    let mut session = Session::create(dir.path(), spec.clone()).unwrap();
    assert!(session.write_report().unwrap().is_none());
    while !session.experiment().is_finished() {
        let pending: Vec<usize> = session.experiment().pending().unwrap().unanswered().collect();
        for v in pending {
            session.submit(v, oracle.peek(v), "tester").unwrap();
        }
        session.advance_if_complete().unwrap();
    }
    let summary = session.write_report().unwrap().unwrap();
    assert_eq!(summary.run, "tiny__lego__seed7");
    assert_eq!(summary.annotations, 45);
    let table = std::fs::read_to_string(dir.path().join("summary.tsv")).unwrap();
    assert_eq!(table, gosl_core::report::summary_table(std::slice::from_ref(&summary)));
    let log = gosl_core::report::read_run_log(&dir.path().join("runs/tiny__lego__seed7.jsonl")).unwrap();
    assert_eq!(log.len(), 7);
    assert!(dir.path().join("scores/tiny__lego__seed7.tsv").is_file());
}
