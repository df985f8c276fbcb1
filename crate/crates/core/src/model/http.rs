//! Chat-completions client for OpenAI-compatible endpoints.
//!
//! Request body:
//!
//! ```json
//! {"model": "...", "temperature": 1.0, "n": 5, "max_tokens": 1024,
//!  "messages": [{"role": "user", "content": [
//!     {"type": "text", "text": "..."},
//!     {"type": "image_url", "image_url": {"url": "data:image/png;base64,..."}}]}]}
//! ```
//!
//! The response must carry `choices[*].message.content`. Transient failures
//! (connection errors, timeouts, 429 and 5xx) are retried with exponential
//! backoff; everything else surfaces immediately.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{GenerationRequest, GenerationResponse, ModelClient, ModelError, PromptInput, Usage};
use crate::prompt::Part;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttachmentMode {
    /// Files become base64 data URLs, http(s) and data URLs pass through.
    #[default]
    Resolve,
    /// Images are described by their reference string only.
    ReferenceText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
    /// Ask for all samples in one request via `n`; otherwise one request per sample.
    pub use_n_parameter: bool,
    pub attachment_mode: AttachmentMode,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: "MICL_API_KEY".into(),
            timeout_secs: 120,
            max_retries: 3,
            backoff_base_ms: 500,
            max_in_flight: 4,
            use_n_parameter: true,
            attachment_mode: AttachmentMode::Resolve,
        }
    }
}

pub struct ChatClient {
    cfg: HttpConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    next_id: AtomicU64,
}

impl std::fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatClient").field("cfg", &self.cfg).finish()
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "image/png",
    }
}

pub fn resolve_image(image_ref: &str) -> Result<String, ModelError> {
    if image_ref.starts_with("http://") || image_ref.starts_with("https://") || image_ref.starts_with("data:") {
        return Ok(image_ref.to_string());
    }
    let path = Path::new(image_ref.strip_prefix("file://").unwrap_or(image_ref));
    let bytes = std::fs::read(path).map_err(|_| ModelError::AttachmentUnresolvable(image_ref.to_string()))?;
    Ok(format!(
        "data:{};base64,{}",
        mime_for(path),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

impl ChatClient {
    pub fn new(cfg: HttpConfig) -> Result<Self, ModelError> {
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(cfg, api_key)
    }

    pub fn with_key(cfg: HttpConfig, api_key: Option<String>) -> Result<Self, ModelError> {
        if cfg.max_in_flight == 0 {
            return Err(ModelError::Config("max_in_flight must be >= 1".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(Self {
            cfg,
            api_key,
            http,
            next_id: AtomicU64::new(1),
        })
    }

    fn content(&self, prompt: &PromptInput) -> Result<Value, ModelError> {
        match prompt {
            PromptInput::Text(t) => Ok(Value::String(t.clone())),
            PromptInput::Multimodal(p) => {
                let mut parts = Vec::new();
                for part in p.parts() {
                    match part {
                        Part::Text(t) => parts.push(json!({"type": "text", "text": t})),
                        Part::Image(r) => match self.cfg.attachment_mode {
                            AttachmentMode::Resolve => parts.push(json!({
                                "type": "image_url",
                                "image_url": {"url": resolve_image(&r)?}
                            })),
                            AttachmentMode::ReferenceText => {
                                parts.push(json!({"type": "text", "text": format!("[image: {r}]")}))
                            }
                        },
                    }
                }
                Ok(Value::Array(parts))
            }
        }
    }

    pub fn request_body(&self, req: &GenerationRequest, n: usize) -> Result<Value, ModelError> {
        Ok(json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": self.content(&req.prompt)?}],
            "temperature": req.temperature,
            "n": n,
            "max_tokens": req.max_output_length,
        }))
    }

    fn post_once(&self, body: &Value, correlation: u64) -> Result<(u16, String), ModelError> {
        let mut rb = self
            .http
            .post(&self.cfg.endpoint)
            .header("x-request-id", correlation.to_string())
            .json(body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| {
            if e.is_timeout() {
                ModelError::Timeout
            } else {
                ModelError::Transport {
                    status: None,
                    message: e.to_string(),
                }
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| ModelError::Transport {
            status: Some(status),
            message: e.to_string(),
        })?;
        Ok((status, text))
    }

    fn post_with_retry(&self, body: &Value) -> Result<String, ModelError> {
        let correlation = self.next_id.fetch_add(1, Ordering::Relaxed);
        let mut attempt = 0;
        loop {
            let outcome = self.post_once(body, correlation);
            let retryable = match &outcome {
                Ok((s, _)) => *s == 429 || *s >= 500,
                Err(e) => e.is_transport(),
            };
            if !retryable {
                return match outcome? {
                    (s, text) if (200..300).contains(&s) => Ok(text),
                    (s, text) => Err(ModelError::Transport {
                        status: Some(s),
                        message: excerpt(&text),
                    }),
                };
            }
            if attempt >= self.cfg.max_retries {
                return match outcome {
                    Ok((s, text)) => Err(ModelError::Transport {
                        status: Some(s),
                        message: excerpt(&text),
                    }),
                    Err(e) => Err(e),
                };
            }
            let wait = self.cfg.backoff_base_ms.saturating_mul(1 << attempt.min(16));
            log::warn!("request {correlation} failed (attempt {}), retrying in {wait} ms", attempt + 1);
            std::thread::sleep(Duration::from_millis(wait));
            attempt += 1;
        }
    }

    fn call(&self, req: &GenerationRequest, n: usize) -> Result<GenerationResponse, ModelError> {
        let body = self.request_body(req, n)?;
        let text = self.post_with_retry(&body)?;
        parse_response(&text, n)
    }

    fn run_concurrently<T, F>(&self, jobs: usize, f: F) -> Vec<Result<T, ModelError>>
    where
        T: Send,
        F: Fn(usize) -> Result<T, ModelError> + Sync,
    {
        let mut out = Vec::with_capacity(jobs);
        let indices: Vec<usize> = (0..jobs).collect();
        for chunk in indices.chunks(self.cfg.max_in_flight) {
            let results: Vec<Result<T, ModelError>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|&i| { let f = &f; s.spawn(move || f(i)) }).collect();
                handles.into_iter().map(|h| h.join().expect("request thread panicked")).collect()
            });
            out.extend(results);
        }
        out
    }
}

/// Parses a chat-completions response body carrying exactly `n` choices.
pub fn parse_response(body: &str, n: usize) -> Result<GenerationResponse, ModelError> {
    let malformed = |why: &str| ModelError::Transport {
        status: Some(200),
        message: format!("malformed response ({why}): {}", excerpt(body)),
    };
    let v: Value = serde_json::from_str(body).map_err(|_| malformed("not JSON"))?;
    let choices = v["choices"].as_array().ok_or_else(|| malformed("no choices"))?;
    let texts = choices
        .iter()
        .map(|c| c["message"]["content"].as_str().map(String::from))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed("choice without text content"))?;
    if texts.len() != n {
        return Err(malformed(&format!("{} choices, expected {n}", texts.len())));
    }
    Ok(GenerationResponse {
        texts,
        usage: Usage {
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        },
        model: v["model"].as_str().unwrap_or_default().to_string(),
    })
}

impl ModelClient for ChatClient {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, ModelError> {
        req.validate()?;
        if self.cfg.use_n_parameter || req.num_samples == 1 {
            return self.call(req, req.num_samples);
        }
        let parts = self.run_concurrently(req.num_samples, |_| self.call(req, 1));
        let mut merged = GenerationResponse {
            texts: Vec::with_capacity(req.num_samples),
            usage: Usage::default(),
            model: String::new(),
        };
        for p in parts {
            let p = p?;
            merged.texts.extend(p.texts);
            merged.usage.prompt_tokens += p.usage.prompt_tokens;
            merged.usage.completion_tokens += p.usage.completion_tokens;
            merged.model = p.model;
        }
        Ok(merged)
    }

    fn generate_batch(&self, reqs: &[GenerationRequest]) -> Vec<Result<GenerationResponse, ModelError>> {
        self.run_concurrently(reqs.len(), |i| self.generate(&reqs[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_parsing() {
        let ok = r#"{"model":"m","choices":[{"message":{"content":"a"}},{"message":{"content":"b"}}],
                     "usage":{"prompt_tokens":3,"completion_tokens":4}}"#;
        let r = parse_response(ok, 2).unwrap();
        assert_eq!(r.texts, vec!["a", "b"]);
        assert_eq!(r.usage.completion_tokens, 4);
        assert!(parse_response(ok, 3).is_err());
        match parse_response("<html>oops</html>", 1) {
            Err(ModelError::Transport { message, .. }) => assert!(message.contains("<html>oops")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn image_resolution() {
        assert_eq!(resolve_image("https://x/y.png").unwrap(), "https://x/y.png");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jpg");
        std::fs::write(&p, [1u8, 2, 3]).unwrap();
        assert_eq!(resolve_image(p.to_str().unwrap()).unwrap(), "data:image/jpeg;base64,AQID");
        assert!(matches!(
            resolve_image("synth://train/1"),
            Err(ModelError::AttachmentUnresolvable(_))
        ));
    }
}
