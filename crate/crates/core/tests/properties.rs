//! Randomized scripted episodes.

mod common;

use std::sync::Arc;

use cellwise_core::cell::{CellKind, OriginStage};
use cellwise_core::fst::AgentState;
use cellwise_core::llm::{LlmRequest, ScriptedProvider};
use cellwise_core::orchestrator::run_task;
use cellwise_core::transcript::{
    read_transcript, validate_transcript, write_transcript, EventBody, Outcome, RepairKind, TranscriptLog,
};
use cellwise_core::trajectory::TreeOp;
use common::*;
use proptest::prelude::*;

// Debug-stage code carries a marker so leaks into later contexts are visible.
const DBG: &str = "# dbg";

fn reply_for(stage: &str, choice: u8) -> String {
    let c = choice as usize;
    let pick = |options: &[&str]| options[c % options.len()].to_string();
    match stage {
        "initial" => pick(&[GOAL_OK, GOAL_BAD]),
        "plan" => pick(&[
            "<Advance to Next STEP>\n[STEP GOAL]: Next\n```python\ny = 2\n```",
            "<Advance to Next STEP>\n[STEP GOAL]: Next\n```python\ny = missing\n```",
            "<Iterate on Current STEP>\n[STEP GOAL]: Redo\n```python\nx = 3\n```",
            "<Iterate on Current STEP>\n[STEP GOAL]: Redo\n```python\nx = missing\n```",
            FULFIL,
            "no signal here",
        ]),
        "exec" => pick(&[AWAIT_OK, "<await>\n```python\nprint(missing)\n```", END_STEP, END_STEP, "```python\n1\n```"]),
        "debug" => pick(&[
            "<await>\n```python\nx = 1 # dbg\n```",
            "<await>\n```python\nx = missing # dbg\n```",
            "<end_debug>\n```python\nx = 1 # dbg\n```",
            "<end_debug>\nGiving up.",
            "garbage",
        ]),
        "filter" => pick(&[
            "<debug_success>\n```python\nx = 1\n```",
            "<debug_success>\n```python\nx = missing\n```",
            "<debug_failure>\nThe input has no such column.",
            "<debug_failure>\n```python\nx = 1\n```",
            "nonsense",
        ]),
        _ => "garbage".into(),
    }
}

fn policy(choices: Vec<u8>) -> Arc<ScriptedProvider> {
    Arc::new(ScriptedProvider::from_policy(Arc::new(move |req: &LlmRequest, i| {
        Some(reply_for(stage_of(req), choices[i % choices.len()]))
    })))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_stay_clean_and_bounded(choices in prop::collection::vec(any::<u8>(), 1..40)) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let llm = policy(choices);
        let (_, r) = rt
            .block_on(run_task("Make x", config(dir.path()), deps(llm.clone(), sim_kernel(dir.path())), TranscriptLog::in_memory()))
            .unwrap();
        validate_transcript(&r.transcript).unwrap();

        // Budgets hold.
        prop_assert!(r.counters.planning_entries <= 7);
        prop_assert!(r.counters.nonroot_nodes <= 15);
        let mut debug_run = 0;
        let mut exec_in_step = 0;
        for e in &r.transcript {
            match &e.body {
                EventBody::Transition(t) if t.to == AgentState::Debug => {
                    debug_run = if t.from == AgentState::Debug { debug_run + 1 } else { 1 };
                    prop_assert!(debug_run <= 8);
                }
                EventBody::Transition(t) if t.to == AgentState::Exec => {
                    exec_in_step += 1;
                    prop_assert!(exec_in_step <= 6);
                }
                EventBody::Execution(x)
                    if x.tree_ops.iter().any(|op| matches!(op, TreeOp::Advance { .. } | TreeOp::Replace { .. })) =>
                {
                    exec_in_step = 0;
                }
                _ => {}
            }
        }

        // Debug-stage code never reaches a planning or execution context.
        for req in llm.requests() {
            if matches!(stage_of(&req), "plan" | "exec" | "initial") {
                prop_assert!(req.messages.iter().all(|m| !m.text().contains(DBG)));
            }
        }
        prop_assert!(r.context.iter().all(|c| c.origin_stage != OriginStage::Debug));
        // Every failing cell was spliced away.
        prop_assert!(r.context.iter().filter(|c| c.is_code()).all(|c| c.outputs.iter().all(|o| !o.is_error())));
        for e in &r.transcript {
            if let EventBody::RepairOutcome(o) = &e.body {
                if o.kind == RepairKind::Failure {
                    prop_assert_eq!(o.cells.len(), 1);
                    prop_assert_eq!(o.cells[0].kind, CellKind::Markdown);
                }
            }
        }
        if r.outcome != Outcome::Aborted {
            prop_assert_eq!(r.transcript.iter().filter(|e| matches!(e.body, EventBody::Final(_))).count(), 1);
        }

        // Transcript files round-trip exactly.
        let path = dir.path().join("t.jsonl");
        write_transcript(&path, &r.transcript).unwrap();
        prop_assert_eq!(read_transcript(&path).unwrap(), r.transcript.clone());
    }
}
