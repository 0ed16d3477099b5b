//! Workloads shared by the criterion benchmarks in `benches/` and their smoke tests.

use std::path::Path;
use std::sync::Arc;

use cellwise_core::cell::{Cell, CellIdGen, OriginStage};
use cellwise_core::eval::{ModelingEntry, QuestionResult};
use cellwise_core::executor::{SimConfig, SimKernel};
use cellwise_core::llm::{PriceTable, ScriptedProvider};
use cellwise_core::orchestrator::{Deps, SessionConfig};
use cellwise_core::prompts::PromptCatalog;
use cellwise_core::trajectory::ContextHistory;

pub const EXEC_REPLY: &str =
    "<await>\nThe frame loaded as expected; summarise it next.\n```python\ndf = load()\nprint(df.describe())\n```";

pub const TASK_REPLIES: [&str; 4] = [
    "[STEP GOAL]: Set up x\n```python\nx = 1\n```",
    "<await>\n```python\nprint(x)\n```",
    "<end_step>",
    "<Fulfill USER INSTRUCTION>\nx is ready.",
];

/// Twenty finished instructions with long summaries plus an open repair episode.
pub fn long_history() -> ContextHistory {
    let mut ids = CellIdGen::new();
    let preamble = vec![Cell::markdown(ids.next_id(), "You are a data scientist.", OriginStage::Init)];
    let mut history = ContextHistory::new(preamble);
    for i in 0..20 {
        history.push_instruction(&format!("Analyse table {i}"), &mut ids);
        let summary = Cell::markdown(ids.next_id(), "x".repeat(3000), OriginStage::Filter);
        history.instructions.last_mut().unwrap().summary.push(summary);
    }
    for _ in 0..8 {
        history
            .repair_turns
            .push(Cell::code(ids.next_id(), "python", "y = f(x)\n".repeat(50), OriginStage::Debug));
    }
    history
}

pub fn question_results(n: usize) -> Vec<QuestionResult> {
    (0..n)
        .map(|i| QuestionResult {
            id: i.to_string(),
            correct: (0..2).map(|j| (i + j) % 3 != 0).collect(),
        })
        .collect()
}

pub fn modeling_entries(n: usize) -> Vec<ModelingEntry> {
    (0..n)
        .map(|i| ModelingEntry {
            p: i as f64 / n as f64,
            b: 0.2,
            g: 0.9,
            completed: i % 7 != 0,
            elapsed_secs: 1.0,
            lower_is_better: false,
        })
        .collect()
}

/// Scripted model on the simulated kernel; no network, no interpreter.
pub fn scripted_task(dir: &Path) -> (SessionConfig, Deps) {
    let deps = Deps {
        llm: Arc::new(ScriptedProvider::from_replies(TASK_REPLIES.iter().map(|s| s.to_string()))),
        kernel: Arc::new(SimKernel::start(&SimConfig::default(), dir).unwrap()),
        prompts: Arc::new(PromptCatalog::builtin()),
        prices: PriceTable::new(),
        tools: Vec::new(),
        echo_extra: serde_json::json!({}),
    };
    let config = SessionConfig {
        model: "scripted".into(),
        workdir: dir.to_path_buf(),
        ..SessionConfig::default()
    };
    (config, deps)
}
