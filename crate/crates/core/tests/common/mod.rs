#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use cellwise_core::executor::{Kernel, SimConfig, SimKernel};
use cellwise_core::fst::AgentState;
use cellwise_core::llm::{LlmProvider, LlmRequest, PriceTable, ScriptedProvider};
use cellwise_core::orchestrator::{Deps, SessionConfig};
use cellwise_core::prompts::PromptCatalog;
use cellwise_core::transcript::{Event, EventBody, TransitionEvent};

/// Which stage prompt a request was built from.
pub fn stage_of(req: &LlmRequest) -> &'static str {
    for m in req.messages.iter().rev() {
        let t = m.text();
        for (marker, stage) in [
            ("Currently in the Post-Debugging Stage", "filter"),
            ("Currently in the Debugging Stage", "debug"),
            ("Currently in the Incremental Execution Stage", "exec"),
            ("Currently in the Planning Stage", "plan"),
            ("You should initiate ONE [STEP GOAL] first", "initial"),
        ] {
            if t.contains(marker) {
                return stage;
            }
        }
    }
    "unknown"
}

pub fn sim_kernel(dir: &Path) -> Arc<dyn Kernel> {
    Arc::new(SimKernel::start(&SimConfig::default(), dir).unwrap())
}

pub fn config(dir: &Path) -> SessionConfig {
    SessionConfig {
        model: "scripted".into(),
        workdir: dir.to_path_buf(),
        ..SessionConfig::default()
    }
}

pub fn deps(llm: Arc<dyn LlmProvider>, kernel: Arc<dyn Kernel>) -> Deps {
    Deps {
        llm,
        kernel,
        prompts: Arc::new(PromptCatalog::builtin()),
        prices: PriceTable::new().with("scripted", "0.01".parse().unwrap(), "0.03".parse().unwrap()),
        tools: Vec::new(),
        echo_extra: serde_json::json!({"backend": {"backend": "sim"}}),
    }
}

pub fn scripted(replies: &[&str]) -> Arc<ScriptedProvider> {
    Arc::new(ScriptedProvider::from_replies(replies.iter().map(|s| s.to_string())))
}

pub fn transitions(events: &[Event]) -> Vec<&TransitionEvent> {
    events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::Transition(t) => Some(t),
            _ => None,
        })
        .collect()
}

/// States entered in order, starting from the first transition target.
pub fn states(events: &[Event]) -> Vec<AgentState> {
    transitions(events).iter().map(|t| t.to).collect()
}

pub fn count_type(events: &[Event], ty: &str) -> usize {
    events.iter().filter(|e| e.body.type_name() == ty).count()
}

pub const GOAL_OK: &str = "[STEP GOAL]: Set up x\n```python\nx = 1\n```";
pub const GOAL_BAD: &str = "[STEP GOAL]: Set up x\n```python\nx = undefined_name\n```";
pub const AWAIT_OK: &str = "<await>\n```python\nprint(x)\n```";
pub const END_STEP: &str = "<end_step>";
pub const FULFIL: &str = "<Fulfill USER INSTRUCTION>\nx is ready.";

/// Validates a notebook document against the bundled nbformat 4.5 schema.
pub fn assert_valid_notebook(nb: &serde_json::Value) {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/nbformat.v4.5.schema.json")).unwrap();
    let schema: serde_json::Value = serde_json::from_str(&text).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    if let Err(errors) = compiled.validate(nb) {
        let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("notebook is not valid nbformat 4.5: {msgs:#?}");
    };
}
