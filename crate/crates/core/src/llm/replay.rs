use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{LlmError, LlmProvider, LlmReply, LlmRequest, Usage};

/// One model call as stored in a transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedCall {
    pub request_hash: String,
    pub reply: String,
    pub usage: Usage,
}

/// Answers by matching the recorded request-hash sequence exactly.
pub struct ReplayProvider {
    calls: Vec<RecordedCall>,
    cursor: Mutex<usize>,
}

impl ReplayProvider {
    pub fn new(calls: Vec<RecordedCall>) -> Self {
        Self {
            calls,
            cursor: Mutex::new(0),
        }
    }

    pub fn consumed(&self) -> usize {
        *self.cursor.lock().expect("poisoned")
    }

    pub fn remaining(&self) -> usize {
        self.calls.len() - self.consumed()
    }
}

#[async_trait]
impl LlmProvider for ReplayProvider {
    async fn complete(&self, request: &LlmRequest) -> Result<LlmReply, LlmError> {
        let mut cursor = self.cursor.lock().expect("poisoned");
        let index = *cursor;
        let actual = request.hash();
        let Some(call) = self.calls.get(index) else {
            return Err(LlmError::ReplayDivergence {
                index,
                expected: "<end of recording>".into(),
                actual,
            });
        };
        if call.request_hash != actual {
            return Err(LlmError::ReplayDivergence {
                index,
                expected: call.request_hash.clone(),
                actual,
            });
        }
        *cursor += 1;
        Ok(LlmReply {
            text: call.reply.clone(),
            usage: call.usage,
            retries: 0,
        })
    }

    fn name(&self) -> &str {
        "replay"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;

    #[tokio::test]
    async fn matches_then_diverges() {
        let r1 = LlmRequest::new("m", 0.0, vec![ChatMessage::user("a")]);
        let r2 = LlmRequest::new("m", 0.0, vec![ChatMessage::user("b")]);
        let p = ReplayProvider::new(vec![
            RecordedCall {
                request_hash: r1.hash(),
                reply: "x".into(),
                usage: Usage::default(),
            },
            RecordedCall {
                request_hash: r1.hash(),
                reply: "y".into(),
                usage: Usage::default(),
            },
        ]);
        assert_eq!(p.complete(&r1).await.unwrap().text, "x");
        assert!(matches!(p.complete(&r2).await, Err(LlmError::ReplayDivergence { index: 1, .. })));
    }

    #[tokio::test]
    async fn empty_recording_errors_first_call() {
        let p = ReplayProvider::new(vec![]);
        let r = LlmRequest::new("m", 0.0, vec![ChatMessage::user("a")]);
        assert!(matches!(p.complete(&r).await, Err(LlmError::ReplayDivergence { index: 0, .. })));
    }
}
