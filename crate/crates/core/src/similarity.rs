//! Semantic similarity in `[0, 1]` as a weighted ensemble of backends.
//!
//! Three backend kinds are provided:
//!
//! - [`LexicalBackend`]: Dice coefficient over token multisets, or over
//!   character bigrams when both inputs are single tokens.
//! - [`LexiconBackend`]: synonym groups loaded from a tab-separated file.
//!   Two strings in the same group score 1; anything else is scored
//!   lexically after mapping each token onto its group's canonical member.
//! - [`EmbeddingBackend`]: cosine similarity of mean-pooled vectors mapped
//!   to `[0, 1]` as `(1 + cos) / 2`. Vectors come from a whitespace-separated
//!   table or from an HTTP embedding service.
//!
//! Every backend is symmetric, returns 1 for two identical non-empty
//! strings, and 0 when either side is empty.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Lexical,
    Lexicon,
    Embedding,
}

pub trait SimilarityBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn score(&self, a: &str, b: &str) -> f64;
}

fn normalize_token(t: &str) -> String {
    t.trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

fn content_tokens(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(normalize_token)
        .filter(|t| !t.is_empty())
        .collect()
}

fn canonical(s: &str) -> String {
    content_tokens(s).join(" ")
}

/// Multiset Dice coefficient: `2 |A ∩ B| / (|A| + |B|)`.
fn dice<T: Ord + Clone>(a: &[T], b: &[T]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort();
    b.sort();
    let (mut i, mut j, mut shared) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    2.0 * shared as f64 / (a.len() + b.len()) as f64
}

fn bigrams(token: &str) -> Vec<(char, char)> {
    let chars: Vec<char> = token.chars().collect();
    chars.windows(2).map(|w| (w[0], w[1])).collect()
}

fn lexical_tokens(ta: &[String], tb: &[String]) -> f64 {
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    if ta == tb {
        return 1.0;
    }
    if ta.len() == 1 && tb.len() == 1 {
        dice(&bigrams(&ta[0]), &bigrams(&tb[0]))
    } else {
        dice(ta, tb)
    }
}

pub fn lexical_similarity(a: &str, b: &str) -> f64 {
    lexical_tokens(&content_tokens(a), &content_tokens(b))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalBackend;

impl SimilarityBackend for LexicalBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Lexical
    }

    fn score(&self, a: &str, b: &str) -> f64 {
        lexical_similarity(a, b)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LexiconBackend {
    /// canonical string -> ids of the groups containing it
    groups: HashMap<String, BTreeSet<usize>>,
    /// group id -> canonical representative (its first member)
    heads: Vec<String>,
}

impl LexiconBackend {
    pub fn from_groups<I, G, S>(groups: I) -> Self
    where
        I: IntoIterator<Item = G>,
        G: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = Self::default();
        for group in groups {
            let members: Vec<String> = group
                .into_iter()
                .map(|m| canonical(m.as_ref()))
                .filter(|m| !m.is_empty())
                .collect();
            if members.is_empty() {
                continue;
            }
            let id = out.heads.len();
            out.heads.push(members[0].clone());
            for m in members {
                out.groups.entry(m).or_default().insert(id);
            }
        }
        out
    }

    /// One group per line, members separated by tabs.
    pub fn parse(raw: &str) -> Self {
        Self::from_groups(
            raw.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.split('\t').collect::<Vec<_>>()),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&raw))
    }

    pub fn group_count(&self) -> usize {
        self.heads.len()
    }

    pub fn share_group(&self, a: &str, b: &str) -> bool {
        match (
            self.groups.get(&canonical(a)),
            self.groups.get(&canonical(b)),
        ) {
            (Some(x), Some(y)) => !x.is_disjoint(y),
            _ => false,
        }
    }

    fn map_token(&self, token: String) -> String {
        match self.groups.get(&token).and_then(|ids| ids.first()) {
            Some(&id) => self.heads[id].clone(),
            None => token,
        }
    }
}

impl SimilarityBackend for LexiconBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Lexicon
    }

    fn score(&self, a: &str, b: &str) -> f64 {
        let ta = content_tokens(a);
        let tb = content_tokens(b);
        if ta.is_empty() || tb.is_empty() {
            return 0.0;
        }
        if self.share_group(a, b) {
            return 1.0;
        }
        let ma: Vec<String> = ta.into_iter().map(|t| self.map_token(t)).collect();
        let mb: Vec<String> = tb.into_iter().map(|t| self.map_token(t)).collect();
        lexical_tokens(&ma, &mb)
    }
}

/// Where embedding vectors come from.
pub enum VectorSource {
    Table {
        dim: usize,
        vectors: HashMap<String, Vec<f64>>,
    },
    Service(EmbeddingService),
}

/// Client for `POST {texts: [...]} -> {vectors: [[...]]}`.
pub struct EmbeddingService {
    url: String,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingService {
    pub fn new(url: impl Into<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Config(format!("embedding client: {e}")))?;
        Ok(Self {
            url: url.into(),
            http,
        })
    }

    pub fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let resp: EmbedResponse = self
            .http
            .post(&self.url)
            .json(&EmbedRequest { texts })
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| Error::Input(format!("embedding service {}: {e}", self.url)))?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::Input(format!(
                "embedding service returned {} vectors for {} texts",
                resp.vectors.len(),
                texts.len()
            )));
        }
        Ok(resp.vectors)
    }
}

pub struct EmbeddingBackend {
    source: VectorSource,
    cache: RwLock<HashMap<String, Option<Vec<f64>>>>,
    misses: AtomicU64,
}

impl EmbeddingBackend {
    pub fn from_table(vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        let mut dim = None;
        for (k, v) in &vectors {
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Input(format!(
                        "vector for {k:?} has dimension {}, expected {d}",
                        v.len()
                    )))
                }
                _ => {}
            }
        }
        let vectors = vectors
            .into_iter()
            .map(|(k, v)| (normalize_token(&k), v))
            .collect();
        Ok(Self::with_source(VectorSource::Table {
            dim: dim.unwrap_or(0),
            vectors,
        }))
    }

    /// Parses `token v1 v2 ... vd` lines; every line must have the same `d`.
    pub fn parse_table(raw: &str) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in raw.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let v: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Input(format!("vector table line {}: {e}", i + 1)))?;
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Input(format!(
                        "vector table line {}: dimension {} differs from {d}",
                        i + 1,
                        v.len()
                    )))
                }
                _ => {}
            }
            vectors.insert(token.to_owned(), v);
        }
        Self::from_table(vectors)
    }

    pub fn load_table(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_table(&raw)
    }

    pub fn from_service(service: EmbeddingService) -> Self {
        Self::with_source(VectorSource::Service(service))
    }

    fn with_source(source: VectorSource) -> Self {
        Self {
            source,
            cache: RwLock::new(HashMap::new()),
            misses: AtomicU64::new(0),
        }
    }

    /// Number of pairs that fell back to the lexical score.
    pub fn miss_count(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    fn vector(&self, s: &str) -> Option<Vec<f64>> {
        let key = canonical(s);
        if let Some(hit) = self.cache.read().expect("cache poisoned").get(&key) {
            return hit.clone();
        }
        let v = match &self.source {
            VectorSource::Table { dim, vectors } => {
                let mut sum = vec![0.0; *dim];
                let mut found = 0usize;
                for t in key.split(' ') {
                    if let Some(v) = vectors.get(t) {
                        sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
                        found += 1;
                    }
                }
                (found > 0).then(|| sum.into_iter().map(|x| x / found as f64).collect())
            }
            VectorSource::Service(svc) => match svc.embed(&[s]) {
                Ok(mut v) => v.pop(),
                Err(err) => {
                    log::warn!("{err}");
                    None
                }
            },
        };
        self.cache
            .write()
            .expect("cache poisoned")
            .insert(key, v.clone());
        v
    }
}

fn cosine01(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || a.len() != b.len() {
        return None;
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Some((1.0 + cos) / 2.0)
}

impl SimilarityBackend for EmbeddingBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Embedding
    }

    fn score(&self, a: &str, b: &str) -> f64 {
        let ca = canonical(a);
        let cb = canonical(b);
        if ca.is_empty() || cb.is_empty() {
            return 0.0;
        }
        if ca == cb {
            return 1.0;
        }
        match (self.vector(a), self.vector(b)) {
            (Some(va), Some(vb)) => cosine01(&va, &vb).unwrap_or_else(|| {
                self.misses.fetch_add(1, Ordering::Relaxed);
                lexical_similarity(a, b)
            }),
            _ => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                lexical_similarity(a, b)
            }
        }
    }
}

/// Convex combination of backend scores.
pub struct SimilarityEnsemble {
    members: Vec<(Box<dyn SimilarityBackend>, f64)>,
}

impl std::fmt::Debug for SimilarityEnsemble {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list()
            .entries(self.members.iter().map(|(b, w)| (b.kind(), *w)))
            .finish()
    }
}

impl SimilarityEnsemble {
    /// Uniform weights over `backends`.
    pub fn uniform(backends: Vec<Box<dyn SimilarityBackend>>) -> Result<Self> {
        let n = backends.len();
        Self::weighted(backends.into_iter().map(|b| (b, 1.0)).collect()).map_err(|e| {
            if n == 0 {
                Error::Config("similarity ensemble needs at least one backend".into())
            } else {
                e
            }
        })
    }

    /// Weights must be non-negative with a positive sum; they are rescaled to sum to 1.
    pub fn weighted(members: Vec<(Box<dyn SimilarityBackend>, f64)>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config(
                "similarity ensemble needs at least one backend".into(),
            ));
        }
        if members.iter().any(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "ensemble weights must be non-negative".into(),
            ));
        }
        let total: f64 = members.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::Config("ensemble weights sum to zero".into()));
        }
        Ok(Self {
            members: members.into_iter().map(|(b, w)| (b, w / total)).collect(),
        })
    }

    pub fn lexical() -> Self {
        Self::uniform(vec![Box::new(LexicalBackend)]).expect("one backend")
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|(_, w)| *w).collect()
    }

    pub fn kinds(&self) -> Vec<BackendKind> {
        self.members.iter().map(|(b, _)| b.kind()).collect()
    }

    pub fn sim(&self, a: &str, b: &str) -> f64 {
        let total: f64 = self
            .members
            .iter()
            .map(|(backend, w)| w * backend.score(a, b).clamp(0.0, 1.0))
            .sum();
        total.clamp(0.0, 1.0)
    }

    /// Soft best-match average between two slot sets.
    ///
    /// Both empty gives 1 and exactly one empty gives 0.
    pub fn sim_slotsets<S: AsRef<str>>(&self, a: &[S], b: &[S]) -> f64 {
        match (a.is_empty(), b.is_empty()) {
            (true, true) => return 1.0,
            (true, false) | (false, true) => return 0.0,
            _ => {}
        }
        let best = |x: &S, others: &[S]| {
            others
                .iter()
                .map(|y| self.sim(x.as_ref(), y.as_ref()))
                .fold(0.0, f64::max)
        };
        let forward: f64 = a.iter().map(|x| best(x, b)).sum();
        let backward: f64 = b.iter().map(|y| best(y, a)).sum();
        ((forward + backward) / (a.len() + b.len()) as f64).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lexicon() -> LexiconBackend {
        LexiconBackend::parse("die\tdecease\tdied\ndead\tvictim\n")
    }

    #[test]
    fn identity_and_disjoint() {
        let e = SimilarityEnsemble::lexical();
        assert_eq!(e.sim("die", "die"), 1.0);
        assert_eq!(e.sim("ab", "cd"), 0.0);
        assert_eq!(e.sim("", ""), 0.0);
        assert_eq!(e.sim("a", "b"), 0.0);
    }

    #[test]
    fn lexical_dice() {
        // {the, army, attacked} vs {army, attacked, town}: 2*2/6
        let s = lexical_similarity("The army attacked", "army attacked town.");
        assert!((s - 2.0 / 3.0).abs() < 1e-12);
        // bigrams of victim / victims: 5 shared of 5 + 6
        let s = lexical_similarity("victim", "victims");
        assert!((s - 10.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn lexicon_groups() {
        let l = lexicon();
        assert_eq!(l.group_count(), 2);
        assert_eq!(l.score("die", "decease"), 1.0);
        assert_eq!(l.score("Victim", "dead"), 1.0);
        assert_eq!(l.score("die", "victim"), 0.0);
        // token mapping: "soldiers died" ~ "soldiers decease"
        assert_eq!(l.score("soldiers died", "soldiers decease"), 1.0);
        let e = SimilarityEnsemble::uniform(vec![Box::new(lexicon())]).unwrap();
        assert_eq!(e.sim("die", "decease"), 1.0);
    }

    #[test]
    fn embedding_cosine_and_fallback() {
        let b = EmbeddingBackend::parse_table("a 1 0\nb 0 1\nc -1 0\nd 1 1\n").unwrap();
        assert!((b.score("a", "b") - 0.5).abs() < 1e-12);
        assert!((b.score("a", "c") - 0.0).abs() < 1e-12);
        assert_eq!(b.score("a", "a"), 1.0);
        // mean pooling: "a b" -> (0.5, 0.5), parallel to d
        assert!((b.score("a b", "d") - 1.0).abs() < 1e-12);
        assert_eq!(b.miss_count(), 0);
        assert_eq!(b.score("zz", "a"), lexical_similarity("zz", "a"));
        assert_eq!(b.miss_count(), 1);
    }

    #[test]
    fn embedding_table_dimension_mismatch() {
        assert!(EmbeddingBackend::parse_table("a 1 0\nb 1\n").is_err());
        assert!(EmbeddingBackend::parse_table("a 1 x\n").is_err());
    }

    #[test]
    fn ensemble_weights() {
        assert!(SimilarityEnsemble::uniform(vec![]).is_err());
        assert!(SimilarityEnsemble::weighted(vec![(Box::new(LexicalBackend), -1.0)]).is_err());
        let e = SimilarityEnsemble::weighted(vec![
            (Box::new(LexicalBackend), 3.0),
            (Box::new(lexicon()), 1.0),
        ])
        .unwrap();
        assert_eq!(e.weights(), vec![0.75, 0.25]);
        assert!((e.sim("die", "decease") - 0.25).abs() < 1e-12);
    }

    #[test]
    fn slotset_similarity() {
        let e = SimilarityEnsemble::lexical();
        assert_eq!(
            e.sim_slotsets(&["agent", "victim"], &["agent", "victim"]),
            1.0
        );
        assert_eq!(e.sim_slotsets(&["x"], &[]), 0.0);
        assert_eq!(e.sim_slotsets::<&str>(&[], &[]), 1.0);
        // sim(b, a) = 0 for single letters, so (1 + 0 + 1) / 3
        let s = e.sim_slotsets(&["a", "b"], &["a"]);
        assert!((s - 2.0 / 3.0).abs() < 1e-12);
    }

    struct Fixed(f64);

    impl SimilarityBackend for Fixed {
        fn kind(&self) -> BackendKind {
            BackendKind::Embedding
        }
        fn score(&self, _: &str, _: &str) -> f64 {
            self.0
        }
    }

    proptest! {
        #[test]
        fn range_and_symmetry(a in "[a-e ]{0,12}", b in "[a-e ]{0,12}") {
            let table = "a 1 0 0\nb 0 1 0\nc 0 0 1\nd 1 1 0\n";
            let e = SimilarityEnsemble::uniform(vec![
                Box::new(LexicalBackend),
                Box::new(LexiconBackend::parse("a\tb\nc\tde\n")),
                Box::new(EmbeddingBackend::parse_table(table).unwrap()),
            ]).unwrap();
            let ab = e.sim(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, e.sim(&b, &a));
            if !a.trim().is_empty() {
                prop_assert_eq!(e.sim(&a, &a), 1.0);
            }
        }

        #[test]
        fn slotset_identity(slots in proptest::collection::vec("[a-z]{1,6}", 1..6)) {
            let e = SimilarityEnsemble::lexical();
            prop_assert_eq!(e.sim_slotsets(&slots, &slots), 1.0);
        }

        #[test]
        fn slotset_symmetry(a in proptest::collection::vec("[a-d]{1,4}", 0..5),
                            b in proptest::collection::vec("[a-d]{1,4}", 0..5)) {
            let e = SimilarityEnsemble::lexical();
            let ab = e.sim_slotsets(&a, &b);
            prop_assert_eq!(ab, e.sim_slotsets(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn ensemble_monotone(lo in 0.0f64..1.0, bump in 0.0f64..1.0, other in 0.0f64..1.0, w in 0.01f64..1.0) {
            let hi = (lo + bump).min(1.0);
            let low = SimilarityEnsemble::weighted(vec![(Box::new(Fixed(lo)), w), (Box::new(Fixed(other)), 1.0 - w + 0.01)]).unwrap();
            let high = SimilarityEnsemble::weighted(vec![(Box::new(Fixed(hi)), w), (Box::new(Fixed(other)), 1.0 - w + 0.01)]).unwrap();
            prop_assert!(high.sim("p", "q") >= low.sim("p", "q"));
        }
    }
}
