//! Stage orchestration over line-oriented JSON files.
//!
//! Every stage reads its predecessor's file from the work directory and
//! writes its own, preceded by a header line naming the stage, the format
//! version and the hash of the configuration the stage depends on. A
//! `manifest-<stage>.json` next to the outputs records input and output
//! hashes; a stage whose manifest still matches is skipped.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::aggregate::{aggregate, cluster_instances, AggregatedSchema, GraphConfig};
use crate::conceptualize::{
    conceptualize_corpus, load_demonstrations, sample_demonstrations, ApiFlavor,
    ConceptualizedInstance, GenerationClient, GenerationSettings, HttpClientConfig,
    HttpGenerationClient, RecordingClient, ReplayClient, ReplayStore,
};
use crate::corpus::{load_corpus, CorpusFilterConfig, EventExpression, InputFormat, LanguageMode};
use crate::error::{Error, Result};
use crate::eval::{mention_harness, GoldMention};
use crate::louvain::louvain_keyed;
use crate::similarity::{
    EmbeddingBackend, EmbeddingService, LexicalBackend, LexiconBackend, SimilarityBackend,
    SimilarityEnsemble,
};
use crate::structuralize::{structuralize, ScoringConfig, StructuredInstance};

pub const FORMAT_VERSION: u32 = 1;
const FILE_MARKER: &str = "schemind-stage";
/// Credentials for the generation endpoint are read from here only.
pub const API_KEY_ENV: &str = "SCHEMIND_API_KEY";

pub const EXPRESSIONS_FILE: &str = "expressions.jsonl";
pub const CONCEPTUALIZED_FILE: &str = "conceptualized.jsonl";
pub const STRUCTURED_FILE: &str = "structured.jsonl";
pub const SCHEMAS_FILE: &str = "schemas.jsonl";
pub const SCHEMAS_TEXT_FILE: &str = "schemas.txt";
pub const ASSIGNMENTS_FILE: &str = "assignments.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_TEXT_FILE: &str = "metrics.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Conceptualize,
    Structuralize,
    Aggregate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Ingest,
        Stage::Conceptualize,
        Stage::Structuralize,
        Stage::Aggregate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Conceptualize => "conceptualize",
            Stage::Structuralize => "structuralize",
            Stage::Aggregate => "aggregate",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: Option<PathBuf>,
    pub format: InputFormat,
    pub filter: CorpusFilterConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: None,
            format: InputFormat::PlainLines,
            filter: CorpusFilterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemonstrationSection {
    pub path: Option<PathBuf>,
    /// Defaults to 8 for space-delimited and 9 for character languages.
    pub count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSection {
    pub url: Option<String>,
    pub api: ApiFlavor,
    pub model: Option<String>,
    pub timeout_secs: u64,
    pub retries: usize,
    pub replay: Option<PathBuf>,
    pub record: Option<PathBuf>,
}

impl Default for EndpointSection {
    fn default() -> Self {
        Self {
            url: None,
            api: ApiFlavor::Native,
            model: None,
            timeout_secs: 120,
            retries: 3,
            replay: None,
            record: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendSpec {
    Lexical {
        #[serde(default = "unit_weight")]
        weight: f64,
    },
    Lexicon {
        path: PathBuf,
        #[serde(default = "unit_weight")]
        weight: f64,
    },
    Embedding {
        #[serde(default)]
        vectors: Option<PathBuf>,
        #[serde(default)]
        service: Option<String>,
        #[serde(default = "unit_weight")]
        weight: f64,
    },
}

fn unit_weight() -> f64 {
    1.0
}

impl BackendSpec {
    fn resource(&self) -> Option<&Path> {
        match self {
            BackendSpec::Lexical { .. } => None,
            BackendSpec::Lexicon { path, .. } => Some(path),
            BackendSpec::Embedding { vectors, .. } => vectors.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilaritySection {
    pub backends: Vec<BackendSpec>,
}

impl Default for SimilaritySection {
    fn default() -> Self {
        Self {
            backends: vec![BackendSpec::Lexical { weight: 1.0 }],
        }
    }
}

impl SimilaritySection {
    pub fn build(&self) -> Result<SimilarityEnsemble> {
        let mut members: Vec<(Box<dyn SimilarityBackend>, f64)> = Vec::new();
        for spec in &self.backends {
            match spec {
                BackendSpec::Lexical { weight } => {
                    members.push((Box::new(LexicalBackend), *weight))
                }
                BackendSpec::Lexicon { path, weight } => {
                    members.push((Box::new(LexiconBackend::load(path)?), *weight))
                }
                BackendSpec::Embedding {
                    vectors,
                    service,
                    weight,
                } => {
                    let backend = match (vectors, service) {
                        (Some(p), None) => EmbeddingBackend::load_table(p)?,
                        (None, Some(url)) => {
                            EmbeddingBackend::from_service(EmbeddingService::new(url)?)
                        }
                        _ => {
                            return Err(Error::Config(
                                "embedding backend needs exactly one of `vectors` or `service`"
                                    .into(),
                            ))
                        }
                    };
                    members.push((Box::new(backend), *weight));
                }
            }
        }
        SimilarityEnsemble::weighted(members)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub gold: Option<PathBuf>,
    pub top_k: usize,
    pub repeats: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            gold: None,
            top_k: 15,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub demonstrations: DemonstrationSection,
    pub generation: GenerationSettings,
    pub endpoint: EndpointSection,
    pub similarity: SimilaritySection,
    pub scoring: ScoringConfig,
    pub graph: GraphConfig,
    pub evaluation: EvaluationSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            corpus: CorpusSection::default(),
            demonstrations: DemonstrationSection::default(),
            generation: GenerationSettings::default(),
            endpoint: EndpointSection::default(),
            similarity: SimilaritySection::default(),
            scoring: ScoringConfig::default(),
            graph: GraphConfig::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(raw: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(raw).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.filter.validate()?;
        self.generation.validate()?;
        self.scoring.validate()?;
        self.graph.validate()?;
        if self.demonstrations.count == Some(0) {
            return Err(Error::Config(
                "demonstrations.count must be positive".into(),
            ));
        }
        if self.similarity.backends.is_empty() {
            return Err(Error::Config(
                "similarity.backends must not be empty".into(),
            ));
        }
        if self.evaluation.top_k == 0 || self.evaluation.repeats == 0 {
            return Err(Error::Config(
                "evaluation.top_k and evaluation.repeats must be positive".into(),
            ));
        }
        for b in &self.similarity.backends {
            let w = match b {
                BackendSpec::Lexical { weight }
                | BackendSpec::Lexicon { weight, .. }
                | BackendSpec::Embedding { weight, .. } => *weight,
            };
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(
                    "similarity weights must be non-negative".into(),
                ));
            }
        }
        if self.endpoint.replay.is_some() && self.endpoint.record.is_some() {
            return Err(Error::Config(
                "replay and record modes are exclusive".into(),
            ));
        }
        Ok(())
    }

    pub fn demonstration_count(&self) -> usize {
        self.demonstrations
            .count
            .unwrap_or(match self.corpus.filter.language {
                LanguageMode::SpaceDelimited => 8,
                LanguageMode::Character => 9,
            })
    }

    /// The configuration values a stage's output depends on.
    fn stage_view(&self, stage: Stage) -> Value {
        match stage {
            Stage::Ingest => json!({ "format": self.corpus.format, "filter": self.corpus.filter }),
            Stage::Conceptualize => json!({
                "seed": self.seed,
                "demonstrations": self.demonstration_count(),
                "generation": {
                    "n": self.generation.n,
                    "max_new_tokens": self.generation.max_new_tokens,
                    "temperature": self.generation.temperature,
                    "stop": self.generation.stop,
                },
            }),
            Stage::Structuralize => {
                json!({ "scoring": self.scoring, "similarity": self.similarity })
            }
            Stage::Aggregate => json!({
                "seed": self.seed,
                "graph": self.graph,
                "similarity": self.similarity,
            }),
            Stage::Evaluate => json!({
                "seed": self.seed,
                "top_k": self.evaluation.top_k,
                "repeats": self.evaluation.repeats,
                "graph": self.graph,
                "similarity": self.similarity,
            }),
        }
    }

    pub fn stage_hash(&self, stage: Stage) -> String {
        hex::encode(Sha256::digest(
            self.stage_view(stage).to_string().as_bytes(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHeader {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub config_hash: String,
}

impl StageHeader {
    fn new(stage: Stage, config_hash: String) -> Self {
        Self {
            format: FILE_MARKER.into(),
            version: FORMAT_VERSION,
            stage,
            config_hash,
        }
    }
}

pub fn write_stage_file<T: Serialize>(
    path: &Path,
    header: &StageHeader,
    items: &[T],
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n").map_err(io)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_stage_file<T: DeserializeOwned>(
    path: &Path,
    expected: Stage,
) -> Result<(StageHeader, Vec<T>)> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = raw.lines().enumerate();
    let record_err = |line: usize, reason: String| Error::Record {
        path: path.to_owned(),
        line,
        reason,
    };
    let (_, first) = lines
        .next()
        .ok_or_else(|| record_err(1, "missing stage header".into()))?;
    let header: StageHeader =
        serde_json::from_str(first).map_err(|e| record_err(1, format!("bad stage header: {e}")))?;
    if header.format != FILE_MARKER || header.version != FORMAT_VERSION {
        return Err(record_err(
            1,
            format!(
                "unsupported stage file {} v{}",
                header.format, header.version
            ),
        ));
    }
    if header.stage != expected {
        return Err(record_err(
            1,
            format!("expected a {expected} file, found {}", header.stage),
        ));
    }
    let mut items = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(line).map_err(|e| record_err(i + 1, e.to_string()))?);
    }
    Ok((header, items))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub format_version: u32,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub counts: Value,
    pub wall_time_ms: u128,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub status: StageStatus,
    pub counts: Value,
    pub outputs: Vec<String>,
}

impl fmt::Display for StageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match self.status {
            StageStatus::Ran => "done",
            StageStatus::UpToDate => "up-to-date",
        };
        writeln!(f, "{:<14} {status}", self.stage.name())?;
        if let Value::Object(map) = &self.counts {
            for (k, v) in map {
                if v.is_number() || v.is_string() || v.is_boolean() {
                    writeln!(f, "  {k:<22} {v}")?;
                }
            }
        }
        for o in &self.outputs {
            writeln!(f, "  -> {o}")?;
        }
        Ok(())
    }
}

/// What a stage needs from the run: the selected stage, or all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    One(Stage),
    All,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    work_dir: PathBuf,
    client: Option<Box<dyn GenerationClient>>,
    force: bool,
}

struct StageOutput {
    counts: Value,
    outputs: Vec<PathBuf>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, work_dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            work_dir: work_dir.into(),
            client: None,
            force: false,
        })
    }

    /// Uses `client` for conceptualization instead of the configured endpoint.
    pub fn with_client(mut self, client: Box<dyn GenerationClient>) -> Self {
        self.client = Some(client);
        self
    }

    /// Reruns stages even when their manifest is current.
    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }

    pub fn run(&self, selection: StageSelection) -> Result<Vec<StageReport>> {
        match selection {
            StageSelection::One(stage) => Ok(vec![self.run_stage(stage)?]),
            StageSelection::All => {
                let mut out = Vec::new();
                for stage in Stage::ALL {
                    if stage == Stage::Evaluate && self.cfg.evaluation.gold.is_none() {
                        log::info!("no gold file configured, skipping evaluate");
                        continue;
                    }
                    out.push(self.run_stage(stage)?);
                }
                Ok(out)
            }
        }
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageReport> {
        fs::create_dir_all(&self.work_dir).map_err(|e| Error::io(&self.work_dir, e))?;
        let inputs = self.stage_inputs(stage)?;
        let config_hash = self.cfg.stage_hash(stage);
        let manifest_path = self.path(&format!("manifest-{}.json", stage.name()));

        if !self.force {
            if let Some(m) = self.current_manifest(&manifest_path, &config_hash, &inputs) {
                log::info!("{stage}: up-to-date");
                return Ok(StageReport {
                    stage,
                    status: StageStatus::UpToDate,
                    counts: m.counts,
                    outputs: m.outputs.into_keys().collect(),
                });
            }
        }

        let started = Instant::now();
        let header = StageHeader::new(stage, config_hash.clone());
        let out = match stage {
            Stage::Ingest => self.ingest(&header)?,
            Stage::Conceptualize => self.conceptualize(&header)?,
            Stage::Structuralize => self.structuralize(&header)?,
            Stage::Aggregate => self.aggregate(&header)?,
            Stage::Evaluate => self.evaluate()?,
        };
        let mut outputs = BTreeMap::new();
        for p in &out.outputs {
            outputs.insert(p.display().to_string(), hash_file(p)?);
        }
        let manifest = Manifest {
            stage,
            format_version: FORMAT_VERSION,
            config_hash,
            inputs,
            outputs: outputs.clone(),
            counts: out.counts.clone(),
            wall_time_ms: started.elapsed().as_millis(),
        };
        fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&manifest_path, e))?;
        Ok(StageReport {
            stage,
            status: StageStatus::Ran,
            counts: out.counts,
            outputs: outputs.into_keys().collect(),
        })
    }

    fn current_manifest(
        &self,
        path: &Path,
        config_hash: &str,
        inputs: &BTreeMap<String, String>,
    ) -> Option<Manifest> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(path).ok()?).ok()?;
        let fresh = m.format_version == FORMAT_VERSION
            && m.config_hash == config_hash
            && &m.inputs == inputs
            && m.outputs
                .iter()
                .all(|(p, h)| hash_file(Path::new(p)).ok().as_deref() == Some(h.as_str()));
        fresh.then_some(m)
    }

    fn require(&self, name: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingStageInput {
                missing: p,
                stage: producer.name(),
            })
        }
    }

    fn require_external(&self, path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
        let p = path.ok_or_else(|| Error::Config(format!("no {what} configured")))?;
        if !p.exists() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
            ));
        }
        Ok(p.clone())
    }

    fn similarity_inputs(&self, inputs: &mut BTreeMap<String, String>) -> Result<()> {
        for b in &self.cfg.similarity.backends {
            if let Some(p) = b.resource() {
                inputs.insert(p.display().to_string(), hash_file(p)?);
            }
        }
        Ok(())
    }

    /// Hashes of every file the stage reads; fails when one is missing.
    fn stage_inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        let mut add = |p: PathBuf| -> Result<()> {
            inputs.insert(p.display().to_string(), hash_file(&p)?);
            Ok(())
        };
        match stage {
            Stage::Ingest => {
                add(self.require_external(self.cfg.corpus.path.as_ref(), "corpus file")?)?
            }
            Stage::Conceptualize => {
                add(self.require(EXPRESSIONS_FILE, Stage::Ingest)?)?;
                add(self.require_external(
                    self.cfg.demonstrations.path.as_ref(),
                    "demonstration file",
                )?)?;
                // where completions come from is an input, not configuration,
                // so recorded and replayed runs write identical files
                let ep = &self.cfg.endpoint;
                match (&self.client, &ep.replay) {
                    (Some(_), _) => {
                        inputs.insert("generation-source".into(), "injected client".into());
                    }
                    (None, Some(r)) => add(self.require_external(Some(r), "replay store")?)?,
                    (None, None) => {
                        let source = json!({ "url": ep.url, "api": ep.api, "model": ep.model });
                        inputs.insert("generation-source".into(), source.to_string());
                    }
                }
            }
            Stage::Structuralize => add(self.require(CONCEPTUALIZED_FILE, Stage::Conceptualize)?)?,
            Stage::Aggregate => add(self.require(STRUCTURED_FILE, Stage::Structuralize)?)?,
            Stage::Evaluate => {
                add(self.require(ASSIGNMENTS_FILE, Stage::Aggregate)?)?;
                add(self.require(STRUCTURED_FILE, Stage::Structuralize)?)?;
                add(self.require_external(self.cfg.evaluation.gold.as_ref(), "gold file")?)?;
            }
        }
        if matches!(
            stage,
            Stage::Structuralize | Stage::Aggregate | Stage::Evaluate
        ) {
            self.similarity_inputs(&mut inputs)?;
        }
        Ok(inputs)
    }

    fn ingest(&self, header: &StageHeader) -> Result<StageOutput> {
        let path = self.require_external(self.cfg.corpus.path.as_ref(), "corpus file")?;
        let (exprs, report) = load_corpus(&path, self.cfg.corpus.format, &self.cfg.corpus.filter)?;
        let out = self.path(EXPRESSIONS_FILE);
        write_stage_file(&out, header, &exprs)?;
        Ok(StageOutput {
            counts: serde_json::to_value(report)?,
            outputs: vec![out],
        })
    }

    fn live_client(&self) -> Result<Box<dyn GenerationClient>> {
        let ep = &self.cfg.endpoint;
        if let Some(replay) = &ep.replay {
            return Ok(Box::new(ReplayClient::open(replay)?));
        }
        let url = ep.url.as_ref().ok_or_else(|| {
            Error::Config("conceptualize needs an endpoint url or a replay store".into())
        })?;
        let mut http = HttpClientConfig::new(url.clone());
        http.flavor = ep.api;
        http.model = ep.model.clone();
        http.timeout = std::time::Duration::from_secs(ep.timeout_secs);
        http.retries = ep.retries;
        http.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(Box::new(HttpGenerationClient::new(http)?))
    }

    fn conceptualize(&self, header: &StageHeader) -> Result<StageOutput> {
        let (_, corpus): (_, Vec<EventExpression>) = read_stage_file(
            &self.require(EXPRESSIONS_FILE, Stage::Ingest)?,
            Stage::Ingest,
        )?;
        let demo_path =
            self.require_external(self.cfg.demonstrations.path.as_ref(), "demonstration file")?;
        let pool = load_demonstrations(&demo_path)?;
        let demos = sample_demonstrations(&pool, self.cfg.demonstration_count(), self.cfg.seed)?;

        let run = |client: &dyn GenerationClient| {
            conceptualize_corpus(client, &demos, &corpus, &self.cfg.generation)
        };
        let mut outputs = Vec::new();
        let (instances, report) = match (&self.client, &self.cfg.endpoint.record) {
            (Some(c), None) => run(c.as_ref())?,
            (client, Some(record)) => {
                let inner = match client {
                    Some(c) => Box::new(c.as_ref()) as Box<dyn GenerationClient>,
                    None => self.live_client()?,
                };
                let rec = RecordingClient::new(inner, ReplayStore::load_or_default(record)?);
                let result = run(&rec);
                // keep whatever was recorded even when the run fails
                rec.snapshot().save(record)?;
                outputs.push(record.clone());
                result?
            }
            (None, None) => run(self.live_client()?.as_ref())?,
        };
        let out = self.path(CONCEPTUALIZED_FILE);
        write_stage_file(&out, header, &instances)?;
        outputs.insert(0, out);
        Ok(StageOutput {
            counts: serde_json::to_value(report)?,
            outputs,
        })
    }

    fn structuralize(&self, header: &StageHeader) -> Result<StageOutput> {
        let (_, instances): (_, Vec<ConceptualizedInstance>) = read_stage_file(
            &self.require(CONCEPTUALIZED_FILE, Stage::Conceptualize)?,
            Stage::Conceptualize,
        )?;
        let ensemble = self.cfg.similarity.build()?;
        let structured = structuralize(&instances, &self.cfg.scoring, &ensemble);
        let out = self.path(STRUCTURED_FILE);
        write_stage_file(&out, header, &structured)?;
        let slots: usize = structured.iter().map(|s| s.slots.len()).sum();
        let type_only = structured.iter().filter(|s| s.slots.is_empty()).count();
        Ok(StageOutput {
            counts: json!({
                "instances": structured.len(),
                "slots_kept": slots,
                "type_only": type_only,
            }),
            outputs: vec![out],
        })
    }

    fn read_structured(&self) -> Result<Vec<StructuredInstance>> {
        let (_, s) = read_stage_file(
            &self.require(STRUCTURED_FILE, Stage::Structuralize)?,
            Stage::Structuralize,
        )?;
        Ok(s)
    }

    fn aggregate(&self, header: &StageHeader) -> Result<StageOutput> {
        let structured = self.read_structured()?;
        let ensemble = self.cfg.similarity.build()?;
        let (graph, outcome) =
            cluster_instances(&structured, &ensemble, &self.cfg.graph, self.cfg.seed);
        let schemas = aggregate(
            &structured,
            &outcome.clusters,
            &ensemble,
            &self.cfg.graph,
            self.cfg.seed,
        )?;

        let assignments: Vec<Assignment> = structured
            .iter()
            .zip(&outcome.clusters.assignment)
            .map(|(s, &c)| Assignment {
                id: s.id.clone(),
                cluster: c,
            })
            .collect();
        let schema_path = self.path(SCHEMAS_FILE);
        let text_path = self.path(SCHEMAS_TEXT_FILE);
        let assign_path = self.path(ASSIGNMENTS_FILE);
        write_stage_file(&schema_path, header, &schemas)?;
        write_stage_file(&assign_path, header, &assignments)?;
        fs::write(&text_path, render_schemas(&schemas)).map_err(|e| Error::io(&text_path, e))?;
        Ok(StageOutput {
            counts: json!({
                "instances": structured.len(),
                "edges": graph.edge_count(),
                "clusters": schemas.len(),
                "modularity_per_pass": outcome.modularity_per_pass,
            }),
            outputs: vec![schema_path, text_path, assign_path],
        })
    }

    fn evaluate(&self) -> Result<StageOutput> {
        let gold_path = self.require_external(self.cfg.evaluation.gold.as_ref(), "gold file")?;
        let gold = load_gold(&gold_path)?;
        let (_, assigned): (_, Vec<Assignment>) = read_stage_file(
            &self.require(ASSIGNMENTS_FILE, Stage::Aggregate)?,
            Stage::Aggregate,
        )?;
        let mut runs: Vec<HashMap<String, usize>> =
            vec![assigned.into_iter().map(|a| (a.id, a.cluster)).collect()];
        if self.cfg.evaluation.repeats > 1 {
            let structured = self.read_structured()?;
            let ensemble = self.cfg.similarity.build()?;
            let (graph, _) =
                cluster_instances(&structured, &ensemble, &self.cfg.graph, self.cfg.seed);
            let keys: Vec<&str> = structured.iter().map(|s| s.id.as_str()).collect();
            for r in 1..self.cfg.evaluation.repeats as u64 {
                let outcome = louvain_keyed(&graph, &keys, self.cfg.seed.wrapping_add(r));
                runs.push(
                    keys.iter()
                        .zip(&outcome.clusters.assignment)
                        .map(|(k, &c)| (k.to_string(), c))
                        .collect(),
                );
            }
        }
        let report = mention_harness(&gold, &runs, self.cfg.evaluation.top_k)?;
        let json_path = self.path(METRICS_FILE);
        let text_path = self.path(METRICS_TEXT_FILE);
        fs::write(&json_path, serde_json::to_string_pretty(&report)? + "\n")
            .map_err(|e| Error::io(&json_path, e))?;
        let text = format!(
            "{}\nretained mentions: {}\nretained types:    {}\nunaligned:         {}\nruns:              {}\n",
            report.metrics,
            report.retained,
            report.retained_types.len(),
            report.unaligned,
            report.runs
        );
        fs::write(&text_path, text).map_err(|e| Error::io(&text_path, e))?;
        Ok(StageOutput {
            counts: serde_json::to_value(&report)?,
            outputs: vec![json_path, text_path],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub id: String,
    pub cluster: usize,
}

/// One `{id, type}` object per line.
pub fn load_gold(path: &Path) -> Result<Vec<GoldMention>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                path: path.to_owned(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn render_schemas(schemas: &[AggregatedSchema]) -> String {
    let mut out = String::new();
    for s in schemas {
        out.push_str(&s.render());
        out.push('\n');
    }
    out
}
