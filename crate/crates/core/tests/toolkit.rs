mod common;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use base64::Engine;
use cellwise_core::llm::{ChatMessage, ContentPart, MessageContent, LlmError, LlmProvider, LlmReply, LlmRequest, ScriptedProvider, Usage};
use cellwise_core::orchestrator::run_task;
use cellwise_core::toolkit::{
    evaluate_image, visual_prompt, visual_tool_descriptor, VisualToolError, VisualToolState, DEFAULT_JUDGE_MODEL,
    USAGE_LIMIT_MESSAGE,
};
use cellwise_core::transcript::{CallPurpose, EventBody, Outcome, TranscriptLog};
use common::*;

/// Judge that fails on the listed call indices.
struct FlakyJudge {
    fail_on: HashSet<usize>,
    calls: AtomicUsize,
}

impl FlakyJudge {
    fn new(fail_on: &[usize]) -> Self {
        Self {
            fail_on: fail_on.iter().copied().collect(),
            calls: AtomicUsize::new(0),
        }
    }
}

#[async_trait]
impl LlmProvider for FlakyJudge {
    async fn complete(&self, _request: &LlmRequest) -> Result<LlmReply, LlmError> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_on.contains(&i) {
            return Err(LlmError::Unavailable {
                attempts: 3,
                last: "503".into(),
            });
        }
        Ok(LlmReply {
            text: format!("verdict {i}"),
            usage: Usage {
                prompt_tokens: 10,
                completion_tokens: 2,
                estimated: false,
            },
            retries: 0,
        })
    }

    fn name(&self) -> &str {
        "flaky"
    }
}

fn parts(m: &ChatMessage) -> &[ContentPart] {
    match &m.content {
        MessageContent::Parts(p) => p,
        MessageContent::Text(_) => &[],
    }
}

fn image(dir: &std::path::Path) -> std::path::PathBuf {
    let p = dir.join("plot.png");
    std::fs::write(&p, b"\x89PNG fake").unwrap();
    p
}

#[tokio::test]
async fn budget_of_four_then_limit_message() {
    let dir = tempfile::tempdir().unwrap();
    let img = image(dir.path());
    let judge = FlakyJudge::new(&[]);
    let mut state = VisualToolState::new(4);
    let mut replies = Vec::new();
    for _ in 0..5 {
        replies.push(evaluate_image(&img, "a bar chart", "is it one?", &mut state, &judge, DEFAULT_JUDGE_MODEL, None).await.unwrap());
    }
    assert_eq!(replies[..4], ["verdict 0", "verdict 1", "verdict 2", "verdict 3"]);
    assert_eq!(replies[4], "Usage limit reached. Please manually evaluate.");
    assert_eq!(replies[4], USAGE_LIMIT_MESSAGE);
    // The fifth request never reached the model.
    assert_eq!(judge.calls.load(Ordering::SeqCst), 4);
    state.reset();
    assert!(!state.exhausted());
}

#[tokio::test]
async fn failed_calls_do_not_consume_budget() {
    let dir = tempfile::tempdir().unwrap();
    let img = image(dir.path());
    let judge = FlakyJudge::new(&[0, 2]);
    let mut state = VisualToolState::new(4);
    let mut ok = 0;
    let mut failed = 0;
    for _ in 0..7 {
        match evaluate_image(&img, "r", "q", &mut state, &judge, DEFAULT_JUDGE_MODEL, None).await {
            Ok(t) if t == USAGE_LIMIT_MESSAGE => break,
            Ok(_) => ok += 1,
            Err(VisualToolError::ModelCallFailed(_)) => failed += 1,
            Err(e) => panic!("{e}"),
        }
    }
    assert_eq!((ok, failed), (4, 2));
    assert_eq!(state.evaluation_cnt, 4);

    // Bad arguments are rejected without a model call or budget use.
    let before = judge.calls.load(Ordering::SeqCst);
    let mut fresh = VisualToolState::new(4);
    let missing = dir.path().join("missing.png");
    assert!(matches!(
        evaluate_image(&missing, "r", "q", &mut fresh, &judge, DEFAULT_JUDGE_MODEL, None).await,
        Err(VisualToolError::InvalidImagePath(_))
    ));
    assert!(matches!(
        evaluate_image(&img, "", "q", &mut fresh, &judge, DEFAULT_JUDGE_MODEL, None).await,
        Err(VisualToolError::EmptyArgument("requirements"))
    ));
    assert_eq!(judge.calls.load(Ordering::SeqCst), before);
    assert_eq!(fresh.evaluation_cnt, 0);
}

#[tokio::test]
async fn judge_request_layout() {
    let dir = tempfile::tempdir().unwrap();
    let img = image(dir.path());
    let judge = Arc::new(ScriptedProvider::from_replies(["fine"]));
    let mut state = VisualToolState::new(4);
    evaluate_image(&img, "REQ", "QUERY", &mut state, judge.as_ref(), "judge-x", None).await.unwrap();
    let req = &judge.requests()[0];
    assert_eq!(req.model, "judge-x");
    assert_eq!(req.temperature, 0.0);
    assert_eq!(req.messages.len(), 1);
    let parts = parts(&req.messages[0]);
    match (&parts[0], &parts[1]) {
        (ContentPart::Text { text }, ContentPart::ImageUrl { image_url }) => {
            assert_eq!(text, "Expected Requirements:\nREQ\nQuery:\nQUERY\nYour response:\n");
            assert_eq!(*text, visual_prompt("REQ", "QUERY"));
            let b64 = image_url.url.strip_prefix("data:image/png;base64,").unwrap();
            let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
            assert_eq!(bytes, std::fs::read(&img).unwrap());
        }
        other => panic!("unexpected parts {other:?}"),
    }
}

#[tokio::test]
async fn session_code_calls_the_tool() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("plot.png"), b"\x89PNG fake").unwrap();
    let call = "print(evaluate_image(\"plot.png\", \"a bar chart\", \"is it one?\"))";
    let goal = format!("[STEP GOAL]: Check the plot\n```python\n{}\n```", vec![call; 5].join("\n"));
    let agent = [goal.as_str(), END_STEP, FULFIL].map(str::to_string);
    let judged = Arc::new(AtomicUsize::new(0));
    let j = judged.clone();
    let llm = Arc::new(ScriptedProvider::from_policy(Arc::new(move |req: &LlmRequest, i| {
        let multimodal = req.messages.iter().any(|m| parts(m).iter().any(|p| matches!(p, ContentPart::ImageUrl { .. })));
        if multimodal {
            j.fetch_add(1, Ordering::SeqCst);
            return Some("Looks like a bar chart.".to_string());
        }
        agent.get(i - j.load(Ordering::SeqCst)).cloned()
    })));
    let mut d = deps(llm, sim_kernel(dir.path()));
    d.tools = vec![visual_tool_descriptor(4)];
    d.prices = d.prices.with(DEFAULT_JUDGE_MODEL, "0.001".parse().unwrap(), "0.002".parse().unwrap());
    let (session, r) = run_task("Check the plot", config(dir.path()), d, TranscriptLog::in_memory()).await.unwrap();
    assert_eq!(r.outcome, Outcome::Fulfilled);
    assert_eq!(judged.load(Ordering::SeqCst), 4);
    let printed: Vec<&str> = r
        .context
        .iter()
        .flat_map(|c| c.outputs.iter())
        .flat_map(|o| o.text.lines())
        .collect();
    assert_eq!(printed.iter().filter(|l| **l == "Looks like a bar chart.").count(), 4);
    assert_eq!(printed.iter().filter(|l| **l == USAGE_LIMIT_MESSAGE).count(), 1);
    // Tool calls are priced and logged but are not agent calls.
    let tool_events = r
        .transcript
        .iter()
        .filter(|e| matches!(&e.body, EventBody::LlmCall(c) if c.purpose == CallPurpose::Tool))
        .count();
    assert_eq!(tool_events, 4);
    assert_eq!(r.counters.llm_calls, 3);
    let ledger_sum: rust_decimal::Decimal = r
        .transcript
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::LlmCall(c) => Some(c.cost),
            _ => None,
        })
        .sum();
    assert_eq!(session.cost_total(), ledger_sum);
    assert!(r.transcript.iter().any(|e| matches!(&e.body, EventBody::LlmCall(c) if c.purpose == CallPurpose::Tool && !c.cost.is_zero())));
}
