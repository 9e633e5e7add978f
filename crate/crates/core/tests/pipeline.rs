mod common;

use std::fs;

use schemind::conceptualize::ReplayStore;
use schemind::pipeline::{Manifest, Pipeline, StageSelection, StageStatus};
use schemind::{Error, Stage};

/// The CLI tests replay this file; regenerate with `SCHEMIND_BLESS=1`.
#[test]
fn replay_fixture_is_current() {
    let path = common::fixture_dir().join("replay.jsonl");
    let want = common::synthetic_store(&common::synthetic_config(&path)).to_jsonl();
    if std::env::var_os("SCHEMIND_BLESS").is_some() {
        fs::write(&path, &want).unwrap();
    }
    assert_eq!(fs::read_to_string(&path).unwrap(), want);
}

fn fixture_pipeline(work: &std::path::Path) -> Pipeline {
    let replay = common::fixture_dir().join("replay.jsonl");
    Pipeline::new(common::synthetic_config(&replay), work).unwrap()
}

#[test]
fn missing_predecessor_names_stage() {
    let work = tempfile::tempdir().unwrap();
    let err = fixture_pipeline(work.path())
        .run_stage(Stage::Structuralize)
        .unwrap_err();
    assert!(
        matches!(
            err,
            Error::MissingStageInput {
                stage: "conceptualize",
                ..
            }
        ),
        "{err}"
    );
    assert!(err.to_string().contains("conceptualize"));
}

#[test]
fn rerun_is_up_to_date_until_inputs_change() {
    let work = tempfile::tempdir().unwrap();
    let p = fixture_pipeline(work.path());
    let first = p.run(StageSelection::All).unwrap();
    assert!(first.iter().all(|r| r.status == StageStatus::Ran));
    assert_eq!(first.len(), 5);
    let second = p.run(StageSelection::All).unwrap();
    assert!(second.iter().all(|r| r.status == StageStatus::UpToDate));

    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(work.path().join("manifest-aggregate.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest.counts["clusters"], 3);
    assert_eq!(manifest.inputs.len(), 2);

    // a changed threshold invalidates structuralize but not the stages before it
    let mut cfg = p.config().clone();
    cfg.scoring.threshold = 0.5;
    let p2 = Pipeline::new(cfg, work.path()).unwrap();
    let third = p2.run(StageSelection::All).unwrap();
    let status: Vec<_> = third.iter().map(|r| r.status).collect();
    assert_eq!(status[..2], [StageStatus::UpToDate, StageStatus::UpToDate]);
    assert_eq!(status[2], StageStatus::Ran);

    let forced = fixture_pipeline(work.path())
        .force(true)
        .run_stage(Stage::Ingest)
        .unwrap();
    assert_eq!(forced.status, StageStatus::Ran);
}

#[test]
fn hand_edited_output_is_not_trusted() {
    let work = tempfile::tempdir().unwrap();
    let p = fixture_pipeline(work.path());
    p.run_stage(Stage::Ingest).unwrap();
    let path = work.path().join("expressions.jsonl");
    let mut raw = fs::read_to_string(&path).unwrap();
    raw.push('\n');
    fs::write(&path, raw).unwrap();
    assert_eq!(p.run_stage(Stage::Ingest).unwrap().status, StageStatus::Ran);
}

#[test]
fn stage_files_carry_headers() {
    let work = tempfile::tempdir().unwrap();
    fixture_pipeline(work.path())
        .run(StageSelection::All)
        .unwrap();
    for (file, stage) in [
        ("expressions.jsonl", "ingest"),
        ("conceptualized.jsonl", "conceptualize"),
        ("structured.jsonl", "structuralize"),
        ("schemas.jsonl", "aggregate"),
        ("assignments.jsonl", "aggregate"),
    ] {
        let raw = fs::read_to_string(work.path().join(file)).unwrap();
        let header: serde_json::Value = serde_json::from_str(raw.lines().next().unwrap()).unwrap();
        assert_eq!(header["stage"], stage, "{file}");
        assert_eq!(header["version"], 1);
        assert_eq!(header["config_hash"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn replay_store_line_order_is_irrelevant() {
    let work_a = tempfile::tempdir().unwrap();
    let work_b = tempfile::tempdir().unwrap();
    let fixture = common::fixture_dir().join("replay.jsonl");
    let mut lines: Vec<String> = fs::read_to_string(&fixture)
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect();
    lines.reverse();
    let shuffled = work_b.path().join("shuffled.jsonl");
    fs::write(&shuffled, lines.join("\n") + "\n").unwrap();
    assert_eq!(
        ReplayStore::load(&shuffled).unwrap(),
        ReplayStore::load(&fixture).unwrap()
    );

    fixture_pipeline(work_a.path())
        .run(StageSelection::All)
        .unwrap();
    let out_b = work_b.path().join("out");
    Pipeline::new(common::synthetic_config(&shuffled), &out_b)
        .unwrap()
        .run(StageSelection::All)
        .unwrap();
    let a = fs::read(work_a.path().join("conceptualized.jsonl")).unwrap();
    let b = fs::read(out_b.join("conceptualized.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_replay_store_misses_immediately() {
    let work = tempfile::tempdir().unwrap();
    let empty = work.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let p = Pipeline::new(common::synthetic_config(&empty), work.path().join("out")).unwrap();
    p.run_stage(Stage::Ingest).unwrap();
    let err = p.run_stage(Stage::Conceptualize).unwrap_err();
    assert!(err.to_string().contains("replay"), "{err}");
}

#[test]
fn repeats_average_over_seeds() {
    let work = tempfile::tempdir().unwrap();
    let replay = common::fixture_dir().join("replay.jsonl");
    let mut cfg = common::synthetic_config(&replay);
    cfg.evaluation.repeats = 3;
    Pipeline::new(cfg, work.path())
        .unwrap()
        .run(StageSelection::All)
        .unwrap();
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(work.path().join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(m["runs"], 3);
    assert_eq!(m["metrics"]["ari"], 1.0);
}
