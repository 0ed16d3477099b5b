use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use cellwise_core::llm::{ChatMessage, HttpProvider, HttpProviderConfig, LlmError, LlmProvider, LlmRequest, RetryPolicy};
use serde_json::{json, Value};

/// Canned responses served in order; the last one repeats.
struct Fake {
    responses: Vec<(StatusCode, Value)>,
    hits: AtomicUsize,
    seen: Mutex<Vec<(Option<String>, Value)>>,
}

async fn complete(State(f): State<Arc<Fake>>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    let i = f.hits.fetch_add(1, Ordering::SeqCst);
    let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).map(str::to_string);
    f.seen.lock().unwrap().push((auth, body));
    let (status, v) = f.responses[i.min(f.responses.len() - 1)].clone();
    (status, Json(v)).into_response()
}

async fn spawn(responses: Vec<(StatusCode, Value)>) -> (String, Arc<Fake>) {
    let fake = Arc::new(Fake {
        responses,
        hits: AtomicUsize::new(0),
        seen: Mutex::new(Vec::new()),
    });
    let app = Router::new().route("/v1/chat/completions", post(complete)).with_state(fake.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}"), fake)
}

fn provider(base: &str, attempts: u32) -> HttpProvider {
    HttpProvider::new(HttpProviderConfig {
        base_url: base.to_string(),
        api_key: Some("k-123".into()),
        request_timeout_secs: 5,
        retry: RetryPolicy {
            max_attempts: attempts,
            base_delay_ms: 5,
            max_delay_ms: 20,
        },
        ..HttpProviderConfig::default()
    })
    .unwrap()
}

fn ok_body(text: &str) -> Value {
    json!({
        "choices": [{ "message": { "role": "assistant", "content": text } }],
        "usage": { "prompt_tokens": 20, "completion_tokens": 4 },
    })
}

fn request() -> LlmRequest {
    LlmRequest::new("gpt-4o", 0.0, vec![ChatMessage::system("sys"), ChatMessage::user("hi")])
}

#[tokio::test]
async fn server_errors_are_retried() {
    let err = (StatusCode::BAD_GATEWAY, json!({ "error": "upstream" }));
    let (base, fake) = spawn(vec![err.clone(), err, (StatusCode::OK, ok_body("<await>"))]).await;
    let reply = provider(&base, 5).complete(&request()).await.unwrap();
    assert_eq!(reply.text, "<await>");
    assert_eq!(reply.retries, 2);
    assert_eq!(reply.usage.prompt_tokens, 20);
    assert_eq!(fake.hits.load(Ordering::SeqCst), 3);
    let seen = fake.seen.lock().unwrap();
    assert_eq!(seen[0].0.as_deref(), Some("Bearer k-123"));
    assert_eq!(seen[0].1["model"], "gpt-4o");
    assert_eq!(seen[0].1["temperature"], 0.0);
    assert_eq!(seen[0].1["messages"][1], json!({ "role": "user", "content": "hi" }));
}

#[tokio::test]
async fn attempts_are_bounded() {
    let (base, fake) = spawn(vec![(StatusCode::SERVICE_UNAVAILABLE, json!({}))]).await;
    let err = provider(&base, 3).complete(&request()).await.unwrap_err();
    assert!(matches!(err, LlmError::Unavailable { attempts: 3, .. }));
    assert_eq!(fake.hits.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let overflow = json!({ "error": { "code": "context_length_exceeded", "message": "too long" } });
    let (base, fake) = spawn(vec![(StatusCode::BAD_REQUEST, overflow)]).await;
    assert!(matches!(provider(&base, 5).complete(&request()).await, Err(LlmError::ContextOverflow(_))));
    assert_eq!(fake.hits.load(Ordering::SeqCst), 1);

    let (base, _) = spawn(vec![(StatusCode::UNAUTHORIZED, json!({ "error": "bad key" }))]).await;
    assert!(matches!(
        provider(&base, 5).complete(&request()).await,
        Err(LlmError::Rejected { status: 401, .. })
    ));

    let (base, _) = spawn(vec![(StatusCode::OK, json!({ "choices": [] }))]).await;
    assert!(matches!(provider(&base, 5).complete(&request()).await, Err(LlmError::BadResponse(_))));
}

#[tokio::test]
async fn missing_usage_is_estimated() {
    let body = json!({ "choices": [{ "message": { "content": "12345678" } }] });
    let (base, _) = spawn(vec![(StatusCode::OK, body)]).await;
    let reply = provider(&base, 1).complete(&request()).await.unwrap();
    assert!(reply.usage.estimated);
    assert_eq!(reply.usage.completion_tokens, 2);
}
