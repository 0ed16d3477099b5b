#![allow(dead_code)]

use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use cellwise_core::executor::{Kernel, SimConfig, SimKernel};
use cellwise_core::fst::AgentState;
use cellwise_core::llm::{LlmRequest, PriceTable, ScriptedProvider};
use cellwise_core::orchestrator::{Deps, SessionConfig};
use cellwise_core::prompts::PromptCatalog;
use cellwise_core::transcript::{Event, EventBody, TransitionEvent};

pub const GOAL_OK: &str = "[STEP GOAL]: Set up x\n```python\nx = 1\n```";
pub const GOAL_BAD: &str = "[STEP GOAL]: Set up x\n```python\nx = undefined_name\n```";
pub const AWAIT_OK: &str = "<await>\n```python\nprint(x)\n```";
pub const END_STEP: &str = "<end_step>";
pub const FULFIL: &str = "<Fulfill USER INSTRUCTION>\nx is ready.";

pub const MODEL: &str = "scripted";
pub const INPUT_PER_1K: &str = "0.01";
pub const OUTPUT_PER_1K: &str = "0.03";

/// Runs the binary and returns its exit code, stdout and stderr.
pub fn cellwise(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cellwise"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

pub fn write_script(path: &Path, replies: &[&str]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, serde_json::to_string(replies).unwrap()).unwrap();
}

/// A config file selecting the scripted provider, the simulated backend
/// and a price for the scripted model.
pub fn write_config(dir: &Path, script: &Path) -> std::path::PathBuf {
    let path = dir.join("cellwise.toml");
    let text = format!(
        "[model]\nprovider = \"scripted\"\nname = \"{MODEL}\"\nscript = {:?}\n\n[executor]\nbackend = \"sim\"\n\n[prices.{MODEL}]\ninput_per_1k = \"{INPUT_PER_1K}\"\noutput_per_1k = \"{OUTPUT_PER_1K}\"\n",
        script.display().to_string()
    );
    std::fs::write(&path, text).unwrap();
    path
}

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
        model: MODEL.into(),
        workdir: dir.to_path_buf(),
        ..SessionConfig::default()
    }
}

pub fn prices() -> PriceTable {
    PriceTable::new().with(MODEL, INPUT_PER_1K.parse().unwrap(), OUTPUT_PER_1K.parse().unwrap())
}

pub fn deps(llm: Arc<ScriptedProvider>, kernel: Arc<dyn Kernel>) -> Deps {
    Deps {
        llm,
        kernel,
        prompts: Arc::new(PromptCatalog::builtin()),
        prices: prices(),
        tools: Vec::new(),
        echo_extra: serde_json::json!({ "backend": { "backend": "sim" } }),
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

pub fn states(events: &[Event]) -> Vec<AgentState> {
    transitions(events).iter().map(|t| t.to).collect()
}
