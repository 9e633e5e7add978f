#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use schemind::conceptualize::{
    build_prompt, load_demonstrations, sample_demonstrations, ReplayStore,
};
use schemind::corpus::InputFormat;
use schemind::pipeline::BackendSpec;
use schemind::PipelineConfig;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic")
}

pub fn synthetic_config(replay: &Path) -> PipelineConfig {
    let dir = fixture_dir();
    let mut cfg = PipelineConfig::default();
    cfg.corpus.path = Some(dir.join("corpus.jsonl"));
    cfg.corpus.format = InputFormat::StructuredRecords;
    cfg.demonstrations.path = Some(dir.join("demos.jsonl"));
    cfg.endpoint.replay = Some(replay.to_owned());
    cfg.similarity.backends = vec![BackendSpec::Lexicon {
        path: dir.join("synonyms.tsv"),
        weight: 1.0,
    }];
    cfg.evaluation.gold = Some(dir.join("gold.jsonl"));
    cfg
}

#[derive(serde::Deserialize)]
struct Scripted {
    text: String,
    completions: Vec<String>,
}

/// Keys the hand-written completions by the prompts the configured run sends.
pub fn synthetic_store(cfg: &PipelineConfig) -> ReplayStore {
    let pool = load_demonstrations(cfg.demonstrations.path.as_ref().unwrap()).unwrap();
    let demos = sample_demonstrations(&pool, cfg.demonstration_count(), cfg.seed).unwrap();
    let raw = fs::read_to_string(fixture_dir().join("completions.jsonl")).unwrap();
    let mut store = ReplayStore::default();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        let s: Scripted = serde_json::from_str(line).unwrap();
        store.insert(&build_prompt(&demos, &s.text).unwrap(), s.completions);
    }
    store
}
