//! Querying a chat-completion endpoint for class descriptions, with a
//! per-class disk cache.
//!
//! Cache layout: `<root>/<dataset_id>/<sha256(class_name)>.json`. Writes go
//! through a temporary file and a rename, so concurrent writers for the same
//! key leave one complete entry behind.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SapError};

pub const API_KEY_ENV: &str = "SAP_LLM_API_KEY";

pub fn description_query(class_name: &str) -> String {
    format!("What are useful visual features for distinguishing a {class_name} in a photo? Answer concisely.")
}

/// A text-in, text-out completion backend.
pub trait ChatProvider: Send + Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, String>;
}

/// OpenAI-compatible `/chat/completions` client.
#[derive(Debug, Clone)]
pub struct HttpChatProvider {
    endpoint: String,
    model: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

impl HttpChatProvider {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: api_key.into(),
            client: reqwest::blocking::Client::new(),
        }
    }

    /// Reads the credential from [`API_KEY_ENV`]; `None` when unset or empty.
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>) -> Option<Self> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.trim().is_empty())?;
        Some(Self::new(endpoint, model, key))
    }
}

impl ChatProvider for HttpChatProvider {
    fn complete(&self, prompt: &str) -> std::result::Result<String, String> {
        let body = ChatRequest {
            model: &self.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(format!("HTTP {status}: {text}"));
        }
        let parsed: ChatResponse = response.json().map_err(|e| e.to_string())?;
        Ok(parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default())
    }
}

/// Splits a response into lines and strips list markers (`1.`, `2)`, `-`, `*`).
pub fn parse_response(text: &str) -> Vec<String> {
    text.lines()
        .map(|line| strip_enumeration(line.trim()).trim().to_string())
        .filter(|line| !line.is_empty())
        .collect()
}

fn strip_enumeration(line: &str) -> &str {
    for marker in ["- ", "* ", "• "] {
        if let Some(rest) = line.strip_prefix(marker) {
            return rest;
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return rest;
        }
    }
    line
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub dataset: String,
    pub class_name: String,
    pub query: String,
    pub response: String,
    pub descriptions: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DescriptionCache {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl DescriptionCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, dataset_id: &str, class_name: &str) -> PathBuf {
        let key = hex::encode(Sha256::digest(class_name.as_bytes()));
        self.root.join(dataset_id).join(format!("{key}.json"))
    }

    pub fn get(&self, dataset_id: &str, class_name: &str) -> Result<Option<CacheEntry>> {
        let path = self.entry_path(dataset_id, class_name);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| SapError::json(path.display().to_string(), e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(SapError::io(path, e)),
        }
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<()> {
        let path = self.entry_path(&entry.dataset, &entry.class_name);
        let dir = path.parent().expect("entry path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| SapError::io(dir, e))?;
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("entry"),
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let text = serde_json::to_string_pretty(entry).expect("cache entry serializes");
        std::fs::write(&tmp, text).map_err(|e| SapError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| SapError::io(&path, e))
    }
}

/// Descriptions for `class_name`, from the cache when present and from
/// `provider` otherwise. Responses are stored unfiltered.
pub fn fetch_descriptions(
    dataset_id: &str,
    class_name: &str,
    provider: Option<&dyn ChatProvider>,
    cache: &DescriptionCache,
) -> Result<Vec<String>> {
    if let Some(hit) = cache.get(dataset_id, class_name)? {
        return Ok(hit.descriptions);
    }
    let provider = provider.ok_or_else(|| SapError::MissingCredential {
        class: class_name.to_string(),
    })?;
    let query = description_query(class_name);
    let response = provider.complete(&query).map_err(|message| SapError::Provider {
        class: class_name.to_string(),
        message,
    })?;
    let descriptions = parse_response(&response);
    cache.put(&CacheEntry {
        dataset: dataset_id.to_string(),
        class_name: class_name.to_string(),
        query,
        response,
        descriptions: descriptions.clone(),
    })?;
    Ok(descriptions)
}
