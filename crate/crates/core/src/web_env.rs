//! The two standard tools — search and webpage visit — over a deterministic
//! fixture corpus, with a remote adapter slot for live runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRUNCATION_MARKER: &str = "…[truncated]";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("page not found: {0}")]
    PageNotFound(String),
    #[error("duplicate url: {0}")]
    DuplicateUrl(String),
    #[error("corpus schema violation: {0}")]
    SchemaViolation(String),
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("http failure: {0}")]
    Http(String),
}

/// One fixture page. `fields` holds structured facts used by the oracle
/// policy for hallucination-free extraction; live runs ignore it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub url: String,
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fields: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    pub url: String,
    pub title: String,
    pub snippet: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub max_doc_chars: usize,
    pub documents: Vec<Document>,
    #[serde(skip)]
    by_url: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(max_doc_chars: usize, documents: Vec<Document>) -> Result<Self, EnvError> {
        let mut corpus = Corpus {
            max_doc_chars,
            documents,
            by_url: HashMap::new(),
        };
        corpus.build_index()?;
        Ok(corpus)
    }

    fn build_index(&mut self) -> Result<(), EnvError> {
        if self.max_doc_chars == 0 {
            return Err(EnvError::SchemaViolation("max_doc_chars must be positive".into()));
        }
        self.by_url.clear();
        for (idx, doc) in self.documents.iter().enumerate() {
            if doc.url.is_empty() {
                return Err(EnvError::SchemaViolation("document url is empty".into()));
            }
            if doc.text.chars().count() > self.max_doc_chars {
                return Err(EnvError::SchemaViolation(format!(
                    "document {} exceeds max_doc_chars", doc.url
                )));
            }
            if self.by_url.insert(doc.url.clone(), idx).is_some() {
                return Err(EnvError::DuplicateUrl(doc.url.clone()));
            }
        }
        Ok(())
    }

    pub fn document(&self, url: &str) -> Option<&Document> {
        self.by_url.get(url).map(|idx| &self.documents[*idx])
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

/// Loads a corpus file: JSON `{max_doc_chars, documents: [{url, title, text, fields?}]}`.
pub fn load_corpus(path: &Path) -> Result<Corpus, EnvError> {
    let bytes = std::fs::read(path)?;
    let mut corpus: Corpus = serde_json::from_slice(&bytes)
        .map_err(|e| EnvError::SchemaViolation(format!("parse: {e}")))?;
    corpus.build_index()?;
    Ok(corpus)
}

/// Lowercase alphanumeric tokens.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn snippet_of(text: &str) -> String {
    text.chars().take(200).collect()
}

/// Term-overlap search: score = |query terms ∩ doc terms| / |query terms|,
/// tokens drawn from title+text. Zero-score documents are excluded; results
/// are ordered by (score desc, url asc) and truncated to `top_k`.
pub fn search(corpus: &Corpus, query: &str, top_k: usize) -> Vec<SearchResult> {
    let query_terms = tokenize(query);
    if query_terms.is_empty() || top_k == 0 {
        return Vec::new();
    }
    let denom = query_terms.len() as f64;
    let mut results: Vec<SearchResult> = corpus
        .documents
        .iter()
        .filter_map(|doc| {
            let doc_terms = tokenize(&format!("{} {}", doc.title, doc.text));
            let overlap = query_terms.intersection(&doc_terms).count();
            if overlap == 0 {
                return None;
            }
            Some(SearchResult {
                url: doc.url.clone(),
                title: doc.title.clone(),
                snippet: snippet_of(&doc.text),
                score: overlap as f64 / denom,
            })
        })
        .collect();
    results.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.url.cmp(&b.url))
    });
    results.truncate(top_k);
    results
}

/// Page text, truncated to `max_chars` with a marker when cut.
pub fn visit(corpus: &Corpus, url: &str, max_chars: usize) -> Result<String, EnvError> {
    let doc = corpus
        .document(url)
        .ok_or_else(|| EnvError::PageNotFound(url.to_string()))?;
    if doc.text.chars().count() <= max_chars {
        return Ok(doc.text.clone());
    }
    let mut out: String = doc.text.chars().take(max_chars).collect();
    out.push_str(TRUNCATION_MARKER);
    Ok(out)
}

/// Tool surface the sub-agents run against. The fixture backend is the
/// acceptance path; the remote adapter is interface-compatible for live runs.
pub trait SearchEnv: Send + Sync {
    fn search(&self, query: &str, top_k: usize) -> Vec<SearchResult>;
    fn visit(&self, url: &str, max_chars: usize) -> Result<String, EnvError>;
}

pub struct FixtureEnv {
    corpus: Arc<Corpus>,
}

impl FixtureEnv {
    pub fn new(corpus: Arc<Corpus>) -> Self {
        Self { corpus }
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }
}

impl SearchEnv for FixtureEnv {
    fn search(&self, query: &str, top_k: usize) -> Vec<SearchResult> {
        search(&self.corpus, query, top_k)
    }

    fn visit(&self, url: &str, max_chars: usize) -> Result<String, EnvError> {
        visit(&self.corpus, url, max_chars)
    }
}

/// Configuration for the live search/fetch adapter. Excluded from the
/// acceptance suite; wire shape mirrors `SearchResult`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteEnvConfig {
    pub base_url: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_s")]
    pub request_timeout_s: f64,
}

fn default_timeout_s() -> f64 {
    30.0
}

pub struct RemoteEnv {
    config: RemoteEnvConfig,
}

impl RemoteEnv {
    pub fn new(config: RemoteEnvConfig) -> Self {
        Self { config }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(self.config.request_timeout_s))
            .build()
    }

    fn api_key(&self) -> Option<String> {
        self.config
            .api_key_env
            .as_ref()
            .and_then(|name| std::env::var(name).ok())
    }
}

impl SearchEnv for RemoteEnv {
    fn search(&self, query: &str, top_k: usize) -> Vec<SearchResult> {
        let url = format!("{}/search", self.config.base_url.trim_end_matches('/'));
        let mut request = self.agent().post(&url);
        if let Some(key) = self.api_key() {
            request = request.set("authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({"query": query, "top_k": top_k});
        match request.send_json(body) {
            Ok(response) => response
                .into_json::<Vec<SearchResult>>()
                .unwrap_or_default(),
            Err(_) => Vec::new(),
        }
    }

    fn visit(&self, url: &str, max_chars: usize) -> Result<String, EnvError> {
        let endpoint = format!("{}/visit", self.config.base_url.trim_end_matches('/'));
        let mut request = self.agent().post(&endpoint);
        if let Some(key) = self.api_key() {
            request = request.set("authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({"url": url, "max_chars": max_chars});
        let response = request.send_json(body).map_err(|e| match e {
            ureq::Error::Status(404, _) => EnvError::PageNotFound(url.to_string()),
            other => EnvError::Http(other.to_string()),
        })?;
        let text = response
            .into_string()
            .map_err(|e| EnvError::Http(e.to_string()))?;
        if text.chars().count() <= max_chars {
            Ok(text)
        } else {
            let mut out: String = text.chars().take(max_chars).collect();
            out.push_str(TRUNCATION_MARKER);
            Ok(out)
        }
    }
}
