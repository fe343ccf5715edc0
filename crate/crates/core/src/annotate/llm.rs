//! Chat-completion client for OpenAI-compatible endpoints, plus the
//! content-addressed annotation cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::prompt::{parse_response, Prompt, REASK_SUFFIX, SYSTEM_INSTRUCTION};
use super::{AnnotationRecord, AnnotatorKind};
use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub max_retries: usize,
    pub timeout_secs: u64,
    pub max_chars_per_item: usize,
    pub parallelism: usize,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        LlmEndpointConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 2,
            timeout_secs: 60,
            max_chars_per_item: 2000,
            parallelism: 4,
        }
    }
}

impl LlmEndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_chars_per_item == 0 {
            return Err(Error::Config("max_chars_per_item must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

pub struct LlmClient {
    agent: ureq::Agent,
    cfg: LlmEndpointConfig,
    api_key: String,
}

impl LlmClient {
    /// Reads the API key from the environment variable named in `cfg`.
    pub fn from_env(cfg: LlmEndpointConfig) -> Result<Self> {
        let key = std::env::var(&cfg.api_key_env).map_err(|_| {
            Error::Config(format!(
                "environment variable {} is not set",
                cfg.api_key_env
            ))
        })?;
        Self::with_api_key(cfg, key)
    }

    pub fn with_api_key(cfg: LlmEndpointConfig, api_key: String) -> Result<Self> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(LlmClient {
            agent,
            cfg,
            api_key,
        })
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.cfg
    }

    /// One chat-completion round trip; returns the first choice's content.
    pub fn complete(&self, system: &str, user: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: system,
                },
                ChatMessage {
                    role: "user",
                    content: user,
                },
            ],
            temperature: 0.0,
        };
        let mut response = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Transport(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| Error::Transport(format!("malformed completion body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| Error::Transport("completion carried no choices".into()))
    }
}

/// Annotation records keyed by prompt digest, optionally persisted as JSONL.
#[derive(Debug, Default)]
pub struct AnnotationCache {
    path: Option<PathBuf>,
    inner: Mutex<CacheState>,
}

#[derive(Debug, Default)]
struct CacheState {
    records: HashMap<String, AnnotationRecord>,
    writer: Option<BufWriter<File>>,
}

impl AnnotationCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads existing records (if the file exists) and appends new ones to it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = HashMap::new();
        if path.exists() {
            for rec in jsonl::read::<AnnotationRecord>(path)? {
                records.insert(rec.prompt_sha256.clone(), rec);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(AnnotationCache {
            path: Some(path.to_path_buf()),
            inner: Mutex::new(CacheState {
                records,
                writer: Some(BufWriter::new(file)),
            }),
        })
    }

    pub fn get(&self, sha256: &str) -> Option<AnnotationRecord> {
        self.inner.lock().unwrap().records.get(sha256).cloned()
    }

    pub fn insert(&self, record: AnnotationRecord) -> Result<()> {
        let mut state = self.inner.lock().unwrap();
        if let Some(w) = state.writer.as_mut() {
            let path = self.path.as_deref().unwrap_or(Path::new("<cache>"));
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        state.records.insert(record.prompt_sha256.clone(), record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Queries the endpoint for one prompt, consulting and filling the cache.
///
/// Unparseable replies are retried with a re-ask suffix. Records whose last
/// attempt failed at the transport level are not cached.
pub fn annotate_llm(
    prompt: &Prompt,
    client: &LlmClient,
    class_names: &[String],
    cache: &AnnotationCache,
) -> Result<AnnotationRecord> {
    if let Some(mut hit) = cache.get(&prompt.sha256) {
        debug!("cache hit for bundle {}", prompt.bundle_id);
        hit.bundle_id = prompt.bundle_id;
        return Ok(hit);
    }

    let reask = format!("{}\n\n{REASK_SUFFIX}", prompt.text);
    let mut last_raw = String::new();
    let mut last_error = None;
    let total = client.config().max_retries + 1;
    for attempt in 1..=total {
        let user = if attempt == 1 { &prompt.text } else { &reask };
        match client.complete(SYSTEM_INSTRUCTION, user) {
            Ok(raw) => {
                last_error = None;
                if let Some(label) = parse_response(&raw, class_names) {
                    let record = AnnotationRecord {
                        bundle_id: prompt.bundle_id,
                        prompt_sha256: prompt.sha256.clone(),
                        raw_response: raw,
                        label: Some(label),
                        attempts: attempt,
                        annotator: AnnotatorKind::Llm,
                        error: None,
                    };
                    cache.insert(record.clone())?;
                    return Ok(record);
                }
                debug!("bundle {}: unparseable reply {raw:?}", prompt.bundle_id);
                last_raw = raw;
            }
            Err(e @ Error::Transport(_)) => {
                warn!("bundle {}: attempt {attempt}: {e}", prompt.bundle_id);
                last_error = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }

    let transport_failure = last_error.is_some();
    let record = AnnotationRecord {
        bundle_id: prompt.bundle_id,
        prompt_sha256: prompt.sha256.clone(),
        raw_response: last_raw,
        label: None,
        attempts: total,
        annotator: AnnotatorKind::Llm,
        error: Some(last_error.unwrap_or_else(|| "no single category in reply".into())),
    };
    if !transport_failure {
        cache.insert(record.clone())?;
    }
    Ok(record)
}
