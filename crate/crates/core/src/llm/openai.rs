//! HTTP JSON chat-completions client.
//!
//! Request: `POST {base_url}{path}` with `{model, temperature, messages,
//! max_tokens?}`. Response: text from `choices[0].message.content`, usage
//! from `usage.prompt_tokens` and `usage.completion_tokens`.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{LlmError, LlmProvider, LlmReply, LlmRequest, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 16_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << retry.min(20));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpProviderConfig {
    pub base_url: String,
    pub path: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    pub auth_header: String,
    /// Prefix placed before the key in the auth header.
    pub auth_scheme: String,
    pub request_timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for HttpProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com".into(),
            path: "/v1/chat/completions".into(),
            api_key: None,
            auth_header: "Authorization".into(),
            auth_scheme: "Bearer ".into(),
            request_timeout_secs: 600,
            retry: RetryPolicy::default(),
        }
    }
}

pub struct HttpProvider {
    config: HttpProviderConfig,
    client: reqwest::Client,
    url: String,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, LlmError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| LlmError::Unavailable {
                attempts: 0,
                last: e.to_string(),
            })?;
        let url = format!("{}{}", config.base_url.trim_end_matches('/'), config.path);
        Ok(Self { config, client, url })
    }

    async fn attempt(&self, body: &Value) -> Result<LlmReply, Attempt> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.header(&self.config.auth_header, format!("{}{}", self.config.auth_scheme, key));
        }
        let resp = req.send().await.map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| Attempt::Transient(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Transient(format!("HTTP {status}: {}", snippet(&text))));
        }
        if !status.is_success() {
            let lower = text.to_ascii_lowercase();
            if lower.contains("context_length_exceeded") || lower.contains("maximum context length") {
                return Err(Attempt::Fatal(LlmError::ContextOverflow(snippet(&text))));
            }
            return Err(Attempt::Fatal(LlmError::Rejected {
                status: status.as_u16(),
                body: snippet(&text),
            }));
        }
        parse_response(&text).map_err(Attempt::Fatal)
    }
}

enum Attempt {
    Transient(String),
    Fatal(LlmError),
}

fn snippet(s: &str) -> String {
    s.chars().take(500).collect()
}

fn parse_response(text: &str) -> Result<LlmReply, LlmError> {
    let v: Value = serde_json::from_str(text).map_err(|e| LlmError::BadResponse(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))?;
    let tokens = |k: &str| v.pointer(&format!("/usage/{k}")).and_then(Value::as_u64);
    let usage = match (tokens("prompt_tokens"), tokens("completion_tokens")) {
        (Some(p), Some(c)) => Usage {
            prompt_tokens: p,
            completion_tokens: c,
            estimated: false,
        },
        _ => Usage {
            prompt_tokens: 0,
            completion_tokens: super::estimate_tokens(content),
            estimated: true,
        },
    };
    Ok(LlmReply {
        text: content.to_string(),
        usage,
        retries: 0,
    })
}

#[async_trait]
impl LlmProvider for HttpProvider {
    async fn complete(&self, request: &LlmRequest) -> Result<LlmReply, LlmError> {
        let body = serde_json::to_value(request).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        let max = self.config.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..max {
            if attempt > 0 {
                tokio::time::sleep(self.config.retry.delay(attempt - 1)).await;
            }
            match self.attempt(&body).await {
                Ok(mut reply) => {
                    reply.retries = attempt;
                    return Ok(reply);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(msg)) => {
                    tracing::warn!(attempt, error = %msg, "transient chat-completion failure");
                    last = msg;
                }
            }
        }
        Err(LlmError::Unavailable { attempts: max, last })
    }

    fn name(&self) -> &str {
        "http"
    }
}
