//! In-context conceptualization: prompt a text-generation endpoint with
//! `<text> → <schema>` demonstrations and parse its completions into
//! schema candidates.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::EventExpression;
use crate::error::{Error, GenerationError, Result};
use crate::schema::{parse_schema, SchemaCandidate, SEPARATOR};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DemonstrationRecord", into = "DemonstrationRecord")]
pub struct Demonstration {
    pub text: String,
    pub schema: SchemaCandidate,
}

#[derive(Serialize, Deserialize)]
struct DemonstrationRecord {
    text: String,
    #[serde(rename = "type")]
    event_type: String,
    #[serde(default)]
    slots: Vec<String>,
}

impl TryFrom<DemonstrationRecord> for Demonstration {
    type Error = String;

    fn try_from(r: DemonstrationRecord) -> std::result::Result<Self, String> {
        Demonstration::new(&r.text, SchemaCandidate::new(&r.event_type, &r.slots))
            .map_err(|e| e.to_string())
    }
}

impl From<Demonstration> for DemonstrationRecord {
    fn from(d: Demonstration) -> Self {
        Self {
            text: d.text,
            event_type: d.schema.event_type,
            slots: d.schema.slots,
        }
    }
}

impl Demonstration {
    pub fn new(text: &str, schema: SchemaCandidate) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::Input("demonstration text is empty".into()));
        }
        if schema.event_type.is_empty() {
            return Err(Error::Input(format!(
                "demonstration {text:?} has an empty type name"
            )));
        }
        Ok(Self {
            text: text.trim().to_owned(),
            schema,
        })
    }
}

/// Reads one `{"text", "type", "slots"}` object per line.
pub fn load_demonstrations(path: &Path) -> Result<Vec<Demonstration>> {
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

/// Draws `m` distinct demonstrations uniformly without replacement.
pub fn sample_demonstrations(
    pool: &[Demonstration],
    m: usize,
    seed: u64,
) -> Result<Vec<Demonstration>> {
    if m == 0 {
        return Err(Error::Config("demonstration count must be positive".into()));
    }
    if pool.len() < m {
        return Err(Error::Config(format!(
            "demonstration pool has {} entries, {m} requested",
            pool.len()
        )));
    }
    let mut picked = pool.to_vec();
    picked.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    picked.truncate(m);
    Ok(picked)
}

/// Single-line form of a text so it cannot break the prompt layout.
fn prompt_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .replace(SEPARATOR, "->")
}

pub fn build_prompt(demos: &[Demonstration], text: &str) -> Result<String> {
    if demos.is_empty() {
        return Err(Error::Precondition(
            "a prompt needs at least one demonstration".into(),
        ));
    }
    let mut out = String::new();
    for d in demos {
        out.push_str(&prompt_text(&d.text));
        out.push(' ');
        out.push_str(SEPARATOR);
        out.push(' ');
        out.push_str(&d.schema.to_string());
        out.push('\n');
    }
    out.push_str(&prompt_text(text));
    out.push(' ');
    out.push_str(SEPARATOR);
    out.push(' ');
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub n: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub stop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub completions: Vec<String>,
}

/// A text-generation endpoint, callable from several workers at once.
pub trait GenerationClient: Send + Sync {
    fn generate(
        &self,
        req: &GenerationRequest,
    ) -> std::result::Result<GenerationResponse, GenerationError>;
}

impl<T: GenerationClient + ?Sized> GenerationClient for &T {
    fn generate(
        &self,
        req: &GenerationRequest,
    ) -> std::result::Result<GenerationResponse, GenerationError> {
        (**self).generate(req)
    }
}

impl<T: GenerationClient + ?Sized> GenerationClient for Box<T> {
    fn generate(
        &self,
        req: &GenerationRequest,
    ) -> std::result::Result<GenerationResponse, GenerationError> {
        (**self).generate(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApiFlavor {
    /// `{prompt, n, max_new_tokens, temperature, stop}` -> `{completions}`
    #[default]
    Native,
    /// OpenAI-style `/v1/completions`: `{model, prompt, n, max_tokens, ...}` -> `{choices: [{text}]}`
    OpenAiCompletions,
}

#[derive(Debug, Clone)]
pub struct HttpClientConfig {
    pub url: String,
    pub flavor: ApiFlavor,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retries: usize,
    pub backoff: Duration,
}

impl HttpClientConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            flavor: ApiFlavor::Native,
            model: None,
            api_key: None,
            timeout: Duration::from_secs(120),
            retries: 3,
            backoff: Duration::from_millis(500),
        }
    }
}

pub struct HttpGenerationClient {
    cfg: HttpClientConfig,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct OpenAiRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    prompt: &'a str,
    n: usize,
    max_tokens: usize,
    temperature: f64,
    stop: &'a [String],
}

#[derive(Deserialize)]
struct OpenAiChoice {
    text: String,
}

#[derive(Deserialize)]
struct OpenAiResponse {
    choices: Vec<OpenAiChoice>,
}

impl HttpGenerationClient {
    pub fn new(cfg: HttpClientConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self { cfg, http })
    }

    fn attempt(
        &self,
        req: &GenerationRequest,
    ) -> std::result::Result<GenerationResponse, AttemptError> {
        let mut builder = self.http.post(&self.cfg.url);
        if let Some(key) = &self.cfg.api_key {
            builder = builder.bearer_auth(key);
        }
        builder = match self.cfg.flavor {
            ApiFlavor::Native => builder.json(req),
            ApiFlavor::OpenAiCompletions => builder.json(&OpenAiRequest {
                model: self.cfg.model.as_deref(),
                prompt: &req.prompt,
                n: req.n,
                max_tokens: req.max_new_tokens,
                temperature: req.temperature,
                stop: &req.stop,
            }),
        };
        let resp = builder
            .send()
            .map_err(|e| AttemptError::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(AttemptError::Retry(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(GenerationError::Protocol(format!(
                "status {status}"
            ))));
        }
        let body = resp
            .text()
            .map_err(|e| AttemptError::Retry(e.to_string()))?;
        let parsed = match self.cfg.flavor {
            ApiFlavor::Native => serde_json::from_str::<GenerationResponse>(&body),
            ApiFlavor::OpenAiCompletions => {
                serde_json::from_str::<OpenAiResponse>(&body).map(|r| GenerationResponse {
                    completions: r.choices.into_iter().map(|c| c.text).collect(),
                })
            }
        };
        parsed.map_err(|e| AttemptError::Fatal(GenerationError::Protocol(e.to_string())))
    }
}

enum AttemptError {
    Retry(String),
    Fatal(GenerationError),
}

impl GenerationClient for HttpGenerationClient {
    fn generate(
        &self,
        req: &GenerationRequest,
    ) -> std::result::Result<GenerationResponse, GenerationError> {
        let attempts = self.cfg.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.cfg.backoff * attempt as u32);
            }
            match self.attempt(req) {
                Ok(resp) => return Ok(resp),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retry(msg)) => {
                    log::debug!("generation attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(GenerationError::Transport {
            attempts,
            message: last,
        })
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

fn prompt_head(prompt: &str) -> String {
    prompt.chars().take(80).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReplayEntry {
    hash: String,
    prompt_head: String,
    completions: Vec<String>,
}

/// Prompt hash -> recorded completions, stored one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayStore {
    entries: BTreeMap<String, ReplayEntry>,
}

impl ReplayStore {
    pub fn parse(raw: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ReplayEntry = serde_json::from_str(line)
                .map_err(|err| Error::Input(format!("replay store line {}: {err}", i + 1)))?;
            entries.insert(e.hash.clone(), e);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&raw)
    }

    /// Loads `path` when it exists, else starts empty.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, prompt: &str, completions: Vec<String>) {
        let hash = prompt_hash(prompt);
        self.entries.insert(
            hash.clone(),
            ReplayEntry {
                hash,
                prompt_head: prompt_head(prompt),
                completions,
            },
        );
    }

    pub fn get(&self, prompt: &str) -> Option<&[String]> {
        self.entries
            .get(&prompt_hash(prompt))
            .map(|e| e.completions.as_slice())
    }

    /// Entries sorted by hash, so the bytes depend only on the contents.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in self.entries.values() {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Serves recorded completions; a missing prompt is an error.
pub struct ReplayClient {
    store: ReplayStore,
}

impl ReplayClient {
    pub fn new(store: ReplayStore) -> Self {
        Self { store }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(ReplayStore::load(path)?))
    }
}

impl GenerationClient for ReplayClient {
    fn generate(
        &self,
        req: &GenerationRequest,
    ) -> std::result::Result<GenerationResponse, GenerationError> {
        match self.store.get(&req.prompt) {
            Some(c) => Ok(GenerationResponse {
                completions: c.to_vec(),
            }),
            None => Err(GenerationError::ReplayMiss {
                hash: prompt_hash(&req.prompt),
                head: prompt_head(&req.prompt),
            }),
        }
    }
}

/// Forwards to a live client and records every successful response.
pub struct RecordingClient<C> {
    inner: C,
    store: Mutex<ReplayStore>,
}

impl<C: GenerationClient> RecordingClient<C> {
    pub fn new(inner: C, store: ReplayStore) -> Self {
        Self {
            inner,
            store: Mutex::new(store),
        }
    }

    pub fn into_store(self) -> ReplayStore {
        self.store.into_inner().expect("store poisoned")
    }

    pub fn snapshot(&self) -> ReplayStore {
        self.store.lock().expect("store poisoned").clone()
    }
}

impl<C: GenerationClient> GenerationClient for RecordingClient<C> {
    fn generate(
        &self,
        req: &GenerationRequest,
    ) -> std::result::Result<GenerationResponse, GenerationError> {
        let resp = self.inner.generate(req)?;
        self.store
            .lock()
            .expect("store poisoned")
            .insert(&req.prompt, resp.completions.clone());
        Ok(resp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub n: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub workers: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            n: 3,
            max_new_tokens: 64,
            temperature: 0.7,
            stop: vec!["\n".into()],
            workers: 4,
        }
    }
}

impl GenerationSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("generation.n must be positive".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config(
                "generation.max_new_tokens must be positive".into(),
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("generation.temperature must be >= 0".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("generation.workers must be positive".into()));
        }
        Ok(())
    }

    fn request(&self, prompt: String) -> GenerationRequest {
        GenerationRequest {
            prompt,
            n: self.n,
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            stop: self.stop.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptualizedInstance {
    #[serde(flatten)]
    pub expression: EventExpression,
    pub candidates: Vec<SchemaCandidate>,
    pub parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedInstance {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptualizeReport {
    pub expressions: usize,
    pub instances: usize,
    pub candidates: usize,
    pub parse_failures: usize,
    pub under_delivered: usize,
    pub dropped: usize,
    pub dropped_instances: Vec<DroppedInstance>,
}

enum Outcome {
    Kept(ConceptualizedInstance, usize),
    Dropped(DroppedInstance),
}

fn conceptualize_one(
    client: &dyn GenerationClient,
    demos: &[Demonstration],
    expr: &EventExpression,
    settings: &GenerationSettings,
) -> Result<Outcome> {
    let prompt = build_prompt(demos, &expr.text)?;
    let resp = match client.generate(&settings.request(prompt)) {
        Ok(r) => r,
        Err(e @ GenerationError::ReplayMiss { .. }) => return Err(e.into()),
        Err(e) => {
            log::warn!("{}: generation failed: {e}", expr.id);
            return Ok(Outcome::Dropped(DroppedInstance {
                id: expr.id.clone(),
                reason: e.to_string(),
            }));
        }
    };
    let shortfall = settings.n.saturating_sub(resp.completions.len());
    let mut candidates = Vec::new();
    let mut failures = 0;
    for raw in resp.completions.iter().take(settings.n) {
        match parse_schema(raw) {
            Ok(c) => candidates.push(c),
            Err(e) => {
                log::debug!("{}: {e}", expr.id);
                failures += 1;
            }
        }
    }
    if candidates.is_empty() {
        log::warn!("{}: no completion parsed, instance dropped", expr.id);
        return Ok(Outcome::Dropped(DroppedInstance {
            id: expr.id.clone(),
            reason: format!("no parseable completion ({failures} failed)"),
        }));
    }
    Ok(Outcome::Kept(
        ConceptualizedInstance {
            expression: expr.clone(),
            candidates,
            parse_failures: failures,
        },
        shortfall,
    ))
}

/// One instance per expression in corpus order, generated by up to
/// `settings.workers` concurrent requests.
///
/// Endpoint failures drop the instance; a replay miss aborts the run.
pub fn conceptualize_corpus(
    client: &dyn GenerationClient,
    demos: &[Demonstration],
    corpus: &[EventExpression],
    settings: &GenerationSettings,
) -> Result<(Vec<ConceptualizedInstance>, ConceptualizeReport)> {
    settings.validate()?;
    if demos.is_empty() {
        return Err(Error::Precondition(
            "conceptualization needs at least one demonstration".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<Outcome>> = pool.install(|| {
        corpus
            .par_iter()
            .map(|expr| conceptualize_one(client, demos, expr, settings))
            .collect()
    });

    let mut report = ConceptualizeReport {
        expressions: corpus.len(),
        ..Default::default()
    };
    let mut instances = Vec::new();
    for outcome in outcomes {
        match outcome? {
            Outcome::Kept(inst, shortfall) => {
                report.candidates += inst.candidates.len();
                report.parse_failures += inst.parse_failures;
                report.under_delivered += usize::from(shortfall > 0);
                instances.push(inst);
            }
            Outcome::Dropped(d) => {
                report.dropped += 1;
                report.dropped_instances.push(d);
            }
        }
    }
    report.instances = instances.len();
    Ok((instances, report))
}
