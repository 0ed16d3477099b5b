use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;

use super::{LlmError, LlmProvider, LlmReply, LlmRequest, Usage};

/// Computes a reply from the request and the 0-based call index.
/// Returning `None` ends the script.
pub type ScriptPolicy = Arc<dyn Fn(&LlmRequest, usize) -> Option<String> + Send + Sync>;

/// Four characters per token, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

enum Source {
    Queue(VecDeque<(String, Option<Usage>)>),
    Policy(ScriptPolicy),
}

/// Deterministic provider answering from a queue or a policy function.
pub struct ScriptedProvider {
    source: Mutex<Source>,
    calls: Mutex<Vec<LlmRequest>>,
}

impl ScriptedProvider {
    pub fn from_replies<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(Source::Queue(replies.into_iter().map(|r| (r.into(), None)).collect()))
    }

    /// Replies with usage taken from a recording.
    pub fn from_recorded(replies: impl IntoIterator<Item = (String, Usage)>) -> Self {
        Self::new(Source::Queue(replies.into_iter().map(|(t, u)| (t, Some(u))).collect()))
    }

    pub fn from_policy(policy: ScriptPolicy) -> Self {
        Self::new(Source::Policy(policy))
    }

    fn new(source: Source) -> Self {
        Self {
            source: Mutex::new(source),
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Requests seen so far.
    pub fn requests(&self) -> Vec<LlmRequest> {
        self.calls.lock().expect("poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("poisoned").len()
    }
}

#[async_trait]
impl LlmProvider for ScriptedProvider {
    async fn complete(&self, request: &LlmRequest) -> Result<LlmReply, LlmError> {
        let index = {
            let mut calls = self.calls.lock().expect("poisoned");
            calls.push(request.clone());
            calls.len() - 1
        };
        let next = match &mut *self.source.lock().expect("poisoned") {
            Source::Queue(q) => q.pop_front(),
            Source::Policy(p) => p(request, index).map(|t| (t, None)),
        };
        let (text, usage) = next.ok_or(LlmError::ScriptExhausted)?;
        let usage = usage.unwrap_or_else(|| Usage {
            prompt_tokens: request.messages.iter().map(|m| estimate_tokens(&m.text())).sum(),
            completion_tokens: estimate_tokens(&text),
            estimated: true,
        });
        Ok(LlmReply {
            text,
            usage,
            retries: 0,
        })
    }

    fn name(&self) -> &str {
        "scripted"
    }
}
