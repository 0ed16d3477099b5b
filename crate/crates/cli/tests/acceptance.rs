//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::HashSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use cellwise_core::cell::{Cell, CellId, CellKind, OriginStage, Signal};
use cellwise_core::eval::{render_stats_table, score_analysis, score_rpg, transcript_counts, transition_stats, ModelingEntry, QuestionResult, TaskTransitionCounts};
use cellwise_core::executor::{Kernel, LocalConfig, LocalKernel};
use cellwise_core::fst::{
    compute_resume, next_state, transition_table, AgentState, Budgets, FeedbackKind, FstError, ResumeTarget,
};
use cellwise_core::llm::{LlmError, LlmProvider, LlmReply, LlmRequest, ScriptedProvider, Usage};
use cellwise_core::orchestrator::{run_task, SessionResult};
use cellwise_core::toolkit::{evaluate_image, VisualToolError, VisualToolState, DEFAULT_JUDGE_MODEL};
use cellwise_core::trajectory::TreeOp;
use cellwise_core::transcript::{
    normalized_lines, read_transcript, validate_transcript, write_transcript, Event, EventBody, Outcome, RepairKind,
    TranscriptLog,
};
use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, RngAlgorithm, TestRng, TestRunner};
use rust_decimal::Decimal;
use serde_json::Value;

use AgentState::*;

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let criteria: Vec<(&str, fn(&tokio::runtime::Runtime) -> Check)> = vec![
        ("fst table", |_| fst_table()),
        ("budget exhaustion", budget_exhaustion),
        ("repair hygiene", |_| repair_hygiene()),
        ("resume rule", resume_rule),
        ("metrics oracle", |_| metrics_oracle()),
        ("determinism and replay", |_| determinism_and_replay()),
        ("executor statefulness, first-error abort, timeout", executor_probes),
        ("visual tool budget", visual_tool),
        ("transition statistics", transition_statistics),
        ("ablations", ablations),
        ("cost ledger", cost_ledger),
    ];
    let total = criteria.len();
    let mut out = std::io::stdout().lock();
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&rt))).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(()) => writeln!(out, "PASS  {name} ({secs:.2}s)").unwrap(),
            Err(e) => {
                writeln!(out, "FAIL  {name} ({secs:.2}s): {e}").unwrap();
                failed.push(name);
            }
        }
    }
    writeln!(out, "{} of {total} criteria passed", total - failed.len()).unwrap();
    out.flush().unwrap();
    drop(out);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------

fn fst_table() -> Check {
    let started = Instant::now();
    use FeedbackKind::{Error as Err_, NoError};
    use Signal::*;
    // (state, signal, after success, after error); None means the resume target.
    let documented: [(AgentState, Signal, Option<AgentState>, Option<AgentState>); 9] = [
        (Plan, AdvanceNextStep, Some(Exec), Some(Debug)),
        (Plan, IterateCurrentStep, Some(Exec), Some(Debug)),
        (Plan, FulfilInstruction, Some(Idle), Some(Debug)),
        (Exec, Await, Some(Exec), Some(Debug)),
        (Exec, EndStep, Some(Plan), Some(Debug)),
        (Debug, Await, Some(Debug), Some(Debug)),
        (Debug, EndDebug, Some(Filter), Some(Filter)),
        (Filter, DebugFailure, None, None),
        (Filter, DebugSuccess, None, Some(Debug)),
    ];
    let resumes = [None, Some(ResumeTarget::Plan), Some(ResumeTarget::Exec), Some(ResumeTarget::Idle)];
    let mut triples = 0;
    for q in AgentState::ALL {
        for sigma in Signal::ALL {
            for f in [NoError, Err_] {
                for resume in resumes {
                    let got = next_state(q, sigma, f, resume);
                    match documented.iter().find(|r| r.0 == q && r.1 == sigma) {
                        None => ensure!(got.is_err(), "({q}, {sigma}) must be rejected, got {got:?}"),
                        Some(row) => {
                            let want = if f == NoError { row.2 } else { row.3 };
                            let expected = match (want, resume) {
                                (Some(s), _) => Ok(s),
                                (None, Some(r)) => Ok(r.into()),
                                (None, None) => Err(FstError::MissingResume),
                            };
                            ensure!(got == expected, "({q}, {sigma}, {f:?}, {resume:?}): want {expected:?}, got {got:?}");
                            triples += usize::from(resume.is_none());
                        }
                    }
                }
            }
        }
    }
    ensure!(triples == 18, "expected 18 admissible triples, saw {triples}");
    // Anchors: plan to execution, end of step back to planning, error to debugging.
    ensure!(next_state(Plan, AdvanceNextStep, NoError, None) == Ok(Exec), "plan advance anchor");
    ensure!(next_state(Exec, EndStep, NoError, None) == Ok(Plan), "end step anchor");
    ensure!(next_state(Exec, Await, Err_, None) == Ok(Debug), "error anchor");
    let exported = transition_table();
    ensure!(exported.len() == 18, "exported table has {} rows", exported.len());
    for row in &exported {
        let doc = documented.iter().find(|r| r.0 == row.state && r.1 == row.signal).unwrap();
        let want = if row.feedback == NoError { doc.2 } else { doc.3 };
        let want = want.map(|s| s.as_str().to_string()).unwrap_or_else(|| "resume".into());
        ensure!(row.next == want, "exported row {row:?} disagrees with {want}");
    }
    ensure!(started.elapsed() < Duration::from_secs(1), "took {:?}", started.elapsed());
    Ok(())
}

// ---------------------------------------------------------------------------

fn never_fixing() -> Arc<ScriptedProvider> {
    Arc::new(ScriptedProvider::from_policy(Arc::new(|req: &LlmRequest, _| {
        Some(
            match stage_of(req) {
                "initial" => GOAL_BAD,
                "plan" => "<Advance to Next STEP>\n[STEP GOAL]: Try again\n```python\ny = undefined_name\n```",
                "exec" => "<await>\n```python\nz = undefined_name\n```",
                "debug" => "<await>\n```python\nw = undefined_name\n```",
                "filter" => "<debug_success>\n```python\nv = undefined_name\n```",
                _ => "?",
            }
            .to_string(),
        )
    })))
}

/// Debug entries per repair episode, in order.
fn debug_episodes(events: &[Event]) -> Vec<u32> {
    let mut episodes: Vec<u32> = Vec::new();
    for t in transitions(events) {
        if t.to == Debug {
            match (t.from, episodes.last_mut()) {
                (Debug, Some(n)) => *n += 1,
                _ => episodes.push(1),
            }
        }
    }
    episodes
}

/// Largest number of exec entries made for one step.
fn max_exec_per_step(events: &[Event]) -> u32 {
    let (mut worst, mut current) = (0, 0);
    for e in events {
        match &e.body {
            EventBody::Transition(t) if t.to == Exec => {
                current += 1;
                worst = worst.max(current);
            }
            b if b.tree_ops().iter().any(|op| matches!(op, TreeOp::Advance { .. } | TreeOp::Replace { .. })) => current = 0,
            _ => {}
        }
    }
    worst
}

fn within_budgets(r: &SessionResult, b: &Budgets) -> Check {
    ensure!(r.counters.planning_entries <= b.max_planning_number, "planning entries {}", r.counters.planning_entries);
    let nodes = b.max_planning_execution_number.unwrap_or(u32::MAX);
    ensure!(r.counters.nonroot_nodes <= nodes, "non-root nodes {}", r.counters.nonroot_nodes);
    let exec = max_exec_per_step(&r.transcript);
    ensure!(exec <= b.max_execution_number, "{exec} exec entries in one step");
    ensure!(
        debug_episodes(&r.transcript).iter().all(|&n| n <= b.max_debug_number),
        "debug episode over budget: {:?}",
        debug_episodes(&r.transcript)
    );
    Ok(())
}

fn budget_exhaustion(rt: &tokio::runtime::Runtime) -> Check {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let budgets = Budgets::default();
    ensure!(
        (budgets.max_planning_number, budgets.max_execution_number, budgets.max_debug_number, budgets.max_planning_execution_number)
            == (7, 6, 8, Some(15)),
        "default budgets are {budgets:?}"
    );
    let (_, r) = rt
        .block_on(run_task("Make x", config(dir.path()), deps(never_fixing(), sim_kernel(dir.path())), TranscriptLog::in_memory()))
        .map_err(|e| e.to_string())?;
    ensure!(r.outcome == Outcome::BudgetStop, "outcome {:?}", r.outcome);
    validate_transcript(&r.transcript).map_err(|e| e.to_string())?;
    let episodes = debug_episodes(&r.transcript);
    ensure!(!episodes.is_empty() && episodes.iter().all(|&n| n == 8), "debug turns per episode: {episodes:?}");
    within_budgets(&r, &budgets)?;
    ensure!(started.elapsed() < Duration::from_secs(5), "took {:?}", started.elapsed());
    Ok(())
}

// ---------------------------------------------------------------------------

// Debug-stage code carries a marker so leaks into later contexts are visible.
const DBG: &str = "# dbg";

fn random_reply(stage: &str, choice: u8) -> String {
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
        "exec" => pick(&[
            AWAIT_OK,
            "<await>\n```python\nprint(missing)\n```",
            END_STEP,
            "<end_step>\n```python\nq = missing\n```",
            "```python\n1\n```",
        ]),
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

fn random_episode(choices: Vec<u8>) -> (SessionResult, Vec<LlmRequest>) {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let llm = Arc::new(ScriptedProvider::from_policy(Arc::new(move |req: &LlmRequest, i| {
        Some(random_reply(stage_of(req), choices[i % choices.len()]))
    })));
    let (_, r) = rt
        .block_on(run_task("Make x", config(dir.path()), deps(llm.clone(), sim_kernel(dir.path())), TranscriptLog::in_memory()))
        .unwrap();
    (r, llm.requests())
}

fn runner(cases: u32) -> TestRunner {
    let config = RunnerConfig {
        cases,
        failure_persistence: None,
        ..RunnerConfig::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn repair_hygiene() -> Check {
    let successes = std::cell::Cell::new(0usize);
    let failures = std::cell::Cell::new(0usize);
    let result = runner(64).run(&prop::collection::vec(any::<u8>(), 1..40), |choices| {
        let (r, requests) = random_episode(choices);
        validate_transcript(&r.transcript).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for e in &r.transcript {
            if let EventBody::RepairOutcome(o) = &e.body {
                match o.kind {
                    RepairKind::Success => successes.set(successes.get() + 1),
                    RepairKind::Failure => {
                        failures.set(failures.get() + 1);
                        prop_assert_eq!(o.cells.len(), 1);
                        prop_assert_eq!(o.cells[0].kind, CellKind::Markdown);
                    }
                }
            }
        }
        // Every context assembled for planning or execution is free of debug code.
        for req in &requests {
            if matches!(stage_of(req), "plan" | "exec" | "initial") {
                prop_assert!(req.messages.iter().all(|m| !m.text().contains(DBG)), "debug code leaked into a {} prompt", stage_of(req));
            }
        }
        prop_assert!(r.context.iter().all(|c| c.origin_stage != OriginStage::Debug));
        prop_assert!(r.context.iter().all(|c| !c.source.contains(DBG)));
        let reports = r.context.iter().filter(|c| c.origin_stage == OriginStage::Filter);
        prop_assert!(reports.clone().all(|c| c.is_markdown() || !c.outputs.iter().any(|o| o.is_error())));
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    let (successes, failures) = (successes.get(), failures.get());
    ensure!(successes > 0 && failures > 0, "generator covered {successes} successes and {failures} failures");
    Ok(())
}

// ---------------------------------------------------------------------------

fn resume_rule(rt: &tokio::runtime::Runtime) -> Check {
    use Signal::*;
    let table = [
        ((Plan, AdvanceNextStep), ResumeTarget::Exec),
        ((Plan, IterateCurrentStep), ResumeTarget::Exec),
        ((Plan, FulfilInstruction), ResumeTarget::Idle),
        ((Exec, Await), ResumeTarget::Exec),
        ((Exec, EndStep), ResumeTarget::Plan),
    ];
    for ((q, s), want) in table {
        let got = compute_resume(q, s);
        ensure!(got == Ok(want), "compute_resume({q}, {s}) = {got:?}, want {want:?}");
    }
    for q in [Idle, Debug, Filter] {
        ensure!(compute_resume(q, Await).is_err(), "{q} cannot be a pre-error state");
    }

    // End to end: control leaves post-filtering for the computed target.
    let fixed = ["<end_debug>\n```python\nq = 1\n```", "<debug_success>\n```python\nq = 1\n```"];
    let cases: [(&str, Vec<&str>, AgentState); 3] = [
        ("plan advance", vec![GOAL_BAD, fixed[0], fixed[1], END_STEP, FULFIL], Exec),
        ("exec await", vec![GOAL_OK, "<await>\n```python\nprint(missing)\n```", fixed[0], fixed[1], END_STEP, FULFIL], Exec),
        ("exec end step", vec![GOAL_OK, "<end_step>\n```python\nq = missing\n```", fixed[0], fixed[1], FULFIL], Plan),
    ];
    for (name, replies, want) in cases {
        let dir = tempfile::tempdir().unwrap();
        let (_, r) = rt
            .block_on(run_task("Make x", config(dir.path()), deps(scripted(&replies), sim_kernel(dir.path())), TranscriptLog::in_memory()))
            .map_err(|e| e.to_string())?;
        ensure!(r.outcome == Outcome::Fulfilled, "{name}: outcome {:?}", r.outcome);
        let after_filter: Vec<AgentState> = transitions(&r.transcript).iter().filter(|t| t.from == Filter).map(|t| t.to).collect();
        ensure!(after_filter == [want], "{name}: left filter for {after_filter:?}, want {want}");
    }

    // Over random episodes, every unforced exit from post-filtering agrees
    // with the rule applied to the action that failed.
    let result = runner(64).run(&prop::collection::vec(any::<u8>(), 1..40), |choices| {
        let (r, _) = random_episode(choices);
        let mut origin: Option<(AgentState, Signal)> = None;
        let mut last_action: Option<(AgentState, Signal)> = None;
        for e in &r.transcript {
            match &e.body {
                EventBody::Action(a) if matches!(a.stage, Plan | Exec) => last_action = Some((a.stage, a.signal)),
                EventBody::Transition(t) if t.to == Debug && matches!(t.from, Plan | Exec) => origin = last_action,
                EventBody::RepairOutcome(o) => {
                    let (q, s) = origin.expect("repair without an origin");
                    prop_assert_eq!(Ok(o.resume), compute_resume(q, s));
                }
                EventBody::Transition(t) if t.from == Filter && t.to != Debug && !t.forced => {
                    let (q, s) = origin.expect("filter without an origin");
                    prop_assert_eq!(Ok(t.to), compute_resume(q, s).map(AgentState::from));
                }
                _ => {}
            }
        }
        Ok(())
    });
    result.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------

/// Exact fraction with a positive denominator.
#[derive(Debug, Clone, Copy)]
struct Q(i128, i128);

impl Q {
    fn new(n: i128, d: i128) -> Q {
        fn gcd(a: i128, b: i128) -> i128 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let g = gcd(n.abs(), d.abs()).max(1);
        let s = if d < 0 { -1 } else { 1 };
        Q(s * n / g, s * d / g)
    }
    fn add(self, o: Q) -> Q {
        Q::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

fn oracle_analysis(matrix: &[Vec<bool>]) -> [f64; 3] {
    let n = matrix.len() as i128;
    let (mut pasq, mut abq) = (Q(0, 1), Q(0, 1));
    let (mut hits, mut total) = (0i128, 0i128);
    for row in matrix {
        let right = row.iter().filter(|b| **b).count() as i128;
        pasq = pasq.add(Q::new(right, row.len() as i128));
        abq = abq.add(Q(i128::from(right == row.len() as i128), 1));
        hits += right;
        total += row.len() as i128;
    }
    [Q::new(pasq.0, pasq.1 * n).f64(), Q::new(abq.0, abq.1 * n).f64(), Q::new(hits, total).f64()]
}

fn oracle_rpg(entries: &[(i64, i64, i64, bool)]) -> f64 {
    let mut sum = Q(0, 1);
    for &(p, b, g, done) in entries {
        let p = if done { p } else { b };
        let r = Q::new((p - b) as i128, (g - b) as i128);
        sum = sum.add(if r.0 < 0 { Q(0, 1) } else { r });
    }
    Q::new(sum.0, sum.1 * entries.len() as i128).f64()
}

fn metrics_oracle() -> Check {
    let started = Instant::now();
    let matrices = prop::collection::vec(prop::collection::vec(any::<bool>(), 1..6), 1..9);
    runner(1000)
        .run(&matrices, |m| {
            let questions: Vec<QuestionResult> = m
                .iter()
                .enumerate()
                .map(|(i, row)| QuestionResult {
                    id: format!("q{i}"),
                    correct: row.clone(),
                })
                .collect();
            let got = score_analysis(&questions).unwrap();
            let want = oracle_analysis(&m);
            for (g, w) in [got.pasq, got.abq, got.uasq].into_iter().zip(want) {
                prop_assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let entries = prop::collection::vec((-50i64..50, -50i64..50, 1i64..40, any::<bool>()), 1..9);
    runner(1000)
        .run(&entries, |raw| {
            let e: Vec<(i64, i64, i64, bool)> = raw.iter().map(|&(p, b, gap, d)| (p, b, b + gap, d)).collect();
            let input: Vec<ModelingEntry> = e
                .iter()
                .map(|&(p, b, g, completed)| ModelingEntry {
                    p: p as f64,
                    b: b as f64,
                    g: g as f64,
                    completed,
                    elapsed_secs: 1.0,
                    lower_is_better: false,
                })
                .collect();
            let got = score_rpg(&input).unwrap();
            prop_assert!((got - oracle_rpg(&e)).abs() <= 1e-12);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    // Halfway to the best score, and a regression clamped to zero.
    let entry = |p: f64| ModelingEntry {
        p,
        b: 0.5,
        g: 1.0,
        completed: true,
        elapsed_secs: 1.0,
        lower_is_better: false,
    };
    let hand = score_rpg(&[entry(0.75), entry(0.3)]).map_err(|e| e.to_string())?;
    ensure!((hand - 0.25).abs() < 1e-12, "hand case gave {hand}");
    ensure!(started.elapsed() < Duration::from_secs(5), "took {:?}", started.elapsed());
    Ok(())
}

// ---------------------------------------------------------------------------

struct Fixture {
    name: &'static str,
    first: Vec<&'static str>,
    followup: Option<Vec<&'static str>>,
}

fn fixtures() -> Vec<Fixture> {
    vec![
        Fixture {
            name: "happy path",
            first: vec![GOAL_OK, AWAIT_OK, END_STEP, FULFIL],
            followup: None,
        },
        Fixture {
            name: "repair success",
            first: vec![GOAL_BAD, "<end_debug>\n```python\nx = 1\n```", "<debug_success>\n```python\nx = 1\n```", END_STEP, FULFIL],
            followup: None,
        },
        Fixture {
            name: "repair failure with a parse retry",
            first: vec![GOAL_BAD, "<end_debug>\nNo fix.", "<debug_failure>\nThe name is undefined.", "thinking aloud", END_STEP, FULFIL],
            followup: None,
        },
        Fixture {
            name: "two instructions",
            first: vec![GOAL_OK, END_STEP, FULFIL],
            followup: Some(vec!["[STEP GOAL]: Double x\n```python\nx = x * 2\nprint(x)\n```", END_STEP, "<Fulfill USER INSTRUCTION>\nx is 2."]),
        },
    ]
}

/// Records a fixture through the binary and returns its transcript path.
fn record(root: &Path, f: &Fixture) -> Result<PathBuf, String> {
    let script = root.join("first.json");
    write_script(&script, &f.first);
    std::fs::write(root.join("task.md"), "Make x").unwrap();
    let work = root.join("work");
    let (code, stdout, stderr) = cellwise(&[
        "run",
        "--instruction",
        root.join("task.md").to_str().unwrap(),
        "--workdir",
        work.to_str().unwrap(),
        "--backend",
        "sim",
        "--script",
        script.to_str().unwrap(),
    ]);
    ensure!(code == 0, "{}: run exited {code}: {stdout}{stderr}", f.name);
    let transcript = work.join(".cellwise/transcript.jsonl");
    if let Some(followup) = &f.followup {
        let script = root.join("followup.json");
        write_script(&script, followup);
        let (code, stdout, stderr) = cellwise(&[
            "resume",
            "--transcript",
            transcript.to_str().unwrap(),
            "--followup",
            "Now double it",
            "--backend",
            "sim",
            "--script",
            script.to_str().unwrap(),
        ]);
        ensure!(code == 0, "{}: resume exited {code}: {stdout}{stderr}", f.name);
    }
    Ok(transcript)
}

/// A copy of the built-in prompts with one character changed in the
/// planning template.
fn edited_prompts(root: &Path) -> PathBuf {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/prompts");
    let dst = root.join("prompts");
    cellwise_core::eval::copy_dir(&src, &dst).unwrap();
    let path = dst.join("planning.txt");
    let mut text = std::fs::read_to_string(&path).unwrap();
    let i = text.find(|c: char| c.is_ascii_lowercase()).unwrap();
    let upper = text[i..i + 1].to_ascii_uppercase();
    text.replace_range(i..i + 1, &upper);
    std::fs::write(&path, text).unwrap();
    dst
}

fn determinism_and_replay() -> Check {
    for f in fixtures() {
        let root = tempfile::tempdir().unwrap();
        let transcript = record(root.path(), &f)?;
        let recorded = read_transcript(&transcript).map_err(|e| e.to_string())?;
        let before = std::fs::read(&transcript).unwrap();
        let replayed_path = root.path().join("replayed.jsonl");
        let (code, stdout, _) = cellwise(&[
            "replay",
            "--transcript",
            transcript.to_str().unwrap(),
            "--out",
            replayed_path.to_str().unwrap(),
        ]);
        ensure!(code == 0, "{}: replay exited {code}: {stdout}", f.name);
        let replayed = read_transcript(&replayed_path).map_err(|e| e.to_string())?;
        let (a, b) = (normalized_lines(&recorded).join("\n"), normalized_lines(&replayed).join("\n"));
        ensure!(a.as_bytes() == b.as_bytes(), "{}: normalized transcripts differ", f.name);
        ensure!(std::fs::read(&transcript).unwrap() == before, "{}: replay modified the recording", f.name);

        let prompts = edited_prompts(root.path());
        let (code, stdout, _) = cellwise(&["replay", "--transcript", transcript.to_str().unwrap(), "--prompts", prompts.to_str().unwrap()]);
        ensure!(code == 4, "{}: edited prompt replay exited {code}: {stdout}", f.name);
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn code_cell(id: &str, src: &str) -> Cell {
    Cell::code(CellId(id.into()), "python", src, OriginStage::Exec)
}

async fn probe(k: &dyn Kernel, label: &str) -> Check {
    let t = Duration::from_secs(30);
    let r = k.execute_cells(&[code_cell("p1", "x = 41")], t, None).await.map_err(|e| e.to_string())?;
    ensure!(!r.feedback.is_error(), "{label}: assignment failed");
    let r = k.execute_cells(&[code_cell("p2", "print(x + 1)")], t, None).await.map_err(|e| e.to_string())?;
    ensure!(r.outputs[0].first().map(|o| o.text.as_str()) == Some("42\n"), "{label}: state lost: {:?}", r.outputs);
    let r = k
        .execute_cells(
            &[code_cell("p3", "y = 1"), code_cell("p4", "z = not_defined"), code_cell("p5", "print('after')")],
            t,
            None,
        )
        .await
        .map_err(|e| e.to_string())?;
    ensure!(r.aborted_at_cell == Some(1), "{label}: aborted at {:?}", r.aborted_at_cell);
    ensure!(r.outputs[2].is_empty(), "{label}: cell after the error ran");
    let d = r.feedback.detail().ok_or("no error detail")?;
    ensure!(d.name == "NameError" && d.cell_id == Some(CellId("p4".into())), "{label}: error {d:?}");
    let r = k.execute_cells(&[code_cell("p6", "print(y)")], t, None).await.map_err(|e| e.to_string())?;
    ensure!(r.outputs[0].first().map(|o| o.text.as_str()) == Some("1\n"), "{label}: cells before the error were lost");
    Ok(())
}

fn executor_probes(rt: &tokio::runtime::Runtime) -> Check {
    let dir = tempfile::tempdir().unwrap();
    rt.block_on(probe(sim_kernel(dir.path()).as_ref(), "sim"))?;
    let local = rt
        .block_on(LocalKernel::start(&LocalConfig::default(), dir.path()))
        .map_err(|e| format!("local kernel: {e}"))?;
    rt.block_on(probe(&local, "local"))?;
    let _ = rt.block_on(local.shutdown());

    // A 5 s limit stands in for the hour-long one.
    let tasks = dir.path().join("tasks");
    std::fs::create_dir_all(&tasks).unwrap();
    std::fs::write(tasks.join("task.md"), "Wait for it.").unwrap();
    std::fs::write(
        tasks.join("slow.json"),
        r#"{ "id": "slow", "instruction_path": "task.md", "expected_artifact": "never.csv", "grader": "file_exists" }"#,
    )
    .unwrap();
    let script = tasks.join("scripts/slow.json");
    write_script(&script, &["[STEP GOAL]: Wait\n```python\nsleep(60)\n```"]);
    let out = dir.path().join("out");
    let started = Instant::now();
    let (code, stdout, stderr) = cellwise(&[
        "bench",
        "--tasks",
        tasks.to_str().unwrap(),
        "--limit-seconds",
        "5",
        "--out",
        out.to_str().unwrap(),
        "--backend",
        "sim",
        "--script",
        script.to_str().unwrap(),
    ]);
    ensure!(code == 0, "bench exited {code}: {stdout}{stderr}");
    ensure!(started.elapsed() < Duration::from_secs(20), "bench took {:?}", started.elapsed());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let task = &report["tasks"][0];
    ensure!(task["outcome"] == "timeout", "outcome {}", task["outcome"]);
    ensure!(task["completed"] == false && task["success"] == false, "task counted as complete: {task}");
    ensure!(task["elapsed_secs"] == 5.0, "elapsed {}", task["elapsed_secs"]);
    Ok(())
}

// ---------------------------------------------------------------------------

/// Judge that fails on the listed call indices.
struct FlakyJudge {
    fail_on: HashSet<usize>,
    calls: AtomicUsize,
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

fn visual_tool(rt: &tokio::runtime::Runtime) -> Check {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("plot.png");
    std::fs::write(&img, b"\x89PNG fake").unwrap();
    rt.block_on(async {
        let judge = FlakyJudge {
            fail_on: HashSet::new(),
            calls: AtomicUsize::new(0),
        };
        let mut state = VisualToolState::new(4);
        let mut replies = Vec::new();
        for _ in 0..5 {
            replies.push(
                evaluate_image(&img, "a bar chart", "is it one?", &mut state, &judge, DEFAULT_JUDGE_MODEL, None)
                    .await
                    .map_err(|e| e.to_string())?,
            );
        }
        ensure!(replies[..4].iter().all(|r| r.starts_with("verdict")), "first four: {replies:?}");
        ensure!(replies[4] == "Usage limit reached. Please manually evaluate.", "fifth reply: {:?}", replies[4]);
        ensure!(judge.calls.load(Ordering::SeqCst) == 4, "the fifth call reached the model");

        let judge = FlakyJudge {
            fail_on: [0, 2].into_iter().collect(),
            calls: AtomicUsize::new(0),
        };
        let mut state = VisualToolState::new(4);
        let (mut ok, mut failed) = (0, 0);
        for _ in 0..10 {
            match evaluate_image(&img, "r", "q", &mut state, &judge, DEFAULT_JUDGE_MODEL, None).await {
                Ok(t) if t == "Usage limit reached. Please manually evaluate." => break,
                Ok(_) => ok += 1,
                Err(VisualToolError::ModelCallFailed(_)) => failed += 1,
                Err(e) => return Err(e.to_string()),
            }
        }
        ensure!((ok, failed) == (4, 2), "{ok} judged and {failed} failed");
        Ok(())
    })
}

// ---------------------------------------------------------------------------

fn transition_statistics(rt: &tokio::runtime::Runtime) -> Check {
    // Two synthetic tasks counted by hand. The first exhausts a 2-turn debug
    // budget, so the move into post-filtering is forced and costs no call.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.budgets.max_debug_number = 2;
    let never_fixed = "<await>\n```python\nx = still_missing\n```";
    let llm = scripted(&[GOAL_BAD, never_fixed, never_fixed, "<debug_failure>\nThe name cannot be resolved.", END_STEP, FULFIL]);
    let (_, a) = rt
        .block_on(run_task("Make x", cfg, deps(llm, sim_kernel(dir.path())), TranscriptLog::in_memory()))
        .map_err(|e| e.to_string())?;
    ensure!(states(&a.transcript) == [Plan, Debug, Debug, Filter, Exec, Plan, Idle], "states {:?}", states(&a.transcript));
    let forced = transitions(&a.transcript).iter().filter(|t| t.forced).count();
    ensure!(forced == 1, "{forced} forced transitions");
    let hand_a = TaskTransitionCounts {
        llm_calls: 6,
        planning_entries: 2,
        repair_entries: 1,
    };
    ensure!(transcript_counts(&a.transcript) == hand_a, "task a: {:?}", transcript_counts(&a.transcript));

    let dir = tempfile::tempdir().unwrap();
    let llm = scripted(&[GOAL_OK, AWAIT_OK, END_STEP, FULFIL]);
    let (_, b) = rt
        .block_on(run_task("Make x", config(dir.path()), deps(llm, sim_kernel(dir.path())), TranscriptLog::in_memory()))
        .map_err(|e| e.to_string())?;
    let hand_b = TaskTransitionCounts {
        llm_calls: 4,
        planning_entries: 2,
        repair_entries: 0,
    };
    ensure!(transcript_counts(&b.transcript) == hand_b, "task b: {:?}", transcript_counts(&b.transcript));

    let stats = transition_stats(&[a.transcript.clone(), b.transcript.clone()]).map_err(|e| e.to_string())?;
    ensure!(
        (stats.tasks, stats.avg_llm_calls, stats.avg_planning_entries, stats.avg_repair_entries) == (2, 5.0, 2.0, 0.5),
        "averages {stats:?}"
    );
    let row = "| synthetic | 2 | 5.00 | 2.00 | 0.50 |";
    ensure!(render_stats_table(&[("synthetic".into(), stats)]).contains(row), "table row missing");

    // The same numbers through the binary.
    let files = tempfile::tempdir().unwrap();
    write_transcript(&files.path().join("a.jsonl"), &a.transcript).unwrap();
    write_transcript(&files.path().join("b.jsonl"), &b.transcript).unwrap();
    let glob = format!("synthetic={}/*.jsonl", files.path().display());
    let (code, stdout, stderr) = cellwise(&["stats", "--transcripts", &glob]);
    ensure!(code == 0 && stdout.contains(row), "stats exited {code}: {stdout}{stderr}");
    Ok(())
}

// ---------------------------------------------------------------------------

fn ablations(rt: &tokio::runtime::Runtime) -> Check {
    let budgets = Budgets::default();
    let run = |disable_planning: bool, disable_repair: bool, llm: Arc<ScriptedProvider>| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        cfg.ablations.disable_planning = disable_planning;
        cfg.ablations.disable_repair = disable_repair;
        rt.block_on(run_task("Make x", cfg, deps(llm, sim_kernel(dir.path())), TranscriptLog::in_memory()))
            .map(|(_, r)| r)
            .map_err(|e| e.to_string())
    };
    let linear = |r: &SessionResult| {
        let replaced = r.transcript.iter().any(|e| e.body.tree_ops().iter().any(|op| matches!(op, TreeOp::Replace { .. })));
        let iterated = r
            .transcript
            .iter()
            .any(|e| matches!(&e.body, EventBody::Action(a) if a.signal == Signal::IterateCurrentStep));
        !replaced && !iterated
    };
    let repair_free = |r: &SessionResult| states(&r.transcript).iter().all(|q| !matches!(q, Debug | Filter));

    // Repair off: errors stay in place and no repair state is entered.
    for llm in [never_fixing(), scripted(&[GOAL_BAD, AWAIT_OK, END_STEP, FULFIL])] {
        let r = run(false, true, llm)?;
        ensure!(repair_free(&r), "repair ablation entered {:?}", states(&r.transcript));
        ensure!(r.outcome != Outcome::Aborted, "repair ablation aborted: {:?}", r.reason);
        within_budgets(&r, &budgets)?;
    }

    // Planning off: an iterate reply is refused and steps only advance.
    let r = run(
        true,
        false,
        scripted(&[
            GOAL_OK,
            END_STEP,
            "<Iterate on Current STEP>\n[STEP GOAL]: Redo\n```python\nx = 2\n```",
            "<Advance to Next STEP>\n[STEP GOAL]: Next\n```python\ny = 2\n```",
            END_STEP,
            FULFIL,
        ]),
    )?;
    ensure!(r.outcome == Outcome::Fulfilled && linear(&r), "planning ablation was not linear");
    let result = runner(32).run(&prop::collection::vec(any::<u8>(), 1..40), |choices| {
        for (p, d) in [(true, false), (true, true), (false, true)] {
            let choices = choices.clone();
            let llm = Arc::new(ScriptedProvider::from_policy(Arc::new(move |req: &LlmRequest, i| {
                Some(random_reply(stage_of(req), choices[i % choices.len()]))
            })));
            let r = run(p, d, llm).map_err(TestCaseError::fail)?;
            prop_assert!(!p || linear(&r), "planning ablation not linear");
            prop_assert!(!d || repair_free(&r), "repair ablation entered repair");
            within_budgets(&r, &budgets).map_err(TestCaseError::fail)?;
        }
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    for (p, d) in [(true, false), (true, true)] {
        let r = run(p, d, never_fixing())?;
        ensure!(r.outcome == Outcome::BudgetStop, "ablation ({p}, {d}) ended {:?}", r.outcome);
        ensure!(linear(&r), "never-fixing run with planning off was not linear");
        within_budgets(&r, &budgets)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn priced(usage: &Usage) -> Decimal {
    let (i, o): (Decimal, Decimal) = (INPUT_PER_1K.parse().unwrap(), OUTPUT_PER_1K.parse().unwrap());
    (Decimal::from(usage.prompt_tokens) * i + Decimal::from(usage.completion_tokens) * o) / Decimal::from(1000)
}

fn logged_costs(events: &[Event]) -> (Decimal, Decimal, usize) {
    let mut logged = Decimal::ZERO;
    let mut oracle = Decimal::ZERO;
    let mut calls = 0;
    for e in events {
        if let EventBody::LlmCall(c) = &e.body {
            logged += c.cost;
            oracle += priced(&c.usage);
            calls += 1;
        }
    }
    (logged, oracle, calls)
}

fn bench_total(tasks: &[&str], root: &Path, config: &Path) -> Result<(Decimal, Vec<Decimal>), String> {
    let dir = root.join(tasks.join("-"));
    std::fs::create_dir_all(dir.join("scripts")).unwrap();
    std::fs::write(dir.join("task.md"), "Make x").unwrap();
    for id in tasks {
        let manifest = serde_json::json!({ "id": id, "instruction_path": "task.md", "expected_artifact": "x.txt", "grader": "file_exists" });
        std::fs::write(dir.join(format!("{id}.json")), manifest.to_string()).unwrap();
        let replies: &[&str] = match *id {
            "a" => &[GOAL_OK, "hmm", AWAIT_OK, END_STEP, FULFIL],
            _ => &[GOAL_BAD, "<end_debug>\n```python\nx = 1\n```", "<debug_success>\n```python\nx = 1\n```", END_STEP, FULFIL],
        };
        write_script(&dir.join(format!("scripts/{id}.json")), replies);
    }
    let out = dir.join("out");
    let (code, stdout, stderr) = cellwise(&[
        "--config",
        config.to_str().unwrap(),
        "bench",
        "--tasks",
        dir.to_str().unwrap(),
        "--limit-seconds",
        "30",
        "--out",
        out.to_str().unwrap(),
    ]);
    ensure!(code == 0, "bench exited {code}: {stdout}{stderr}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let dec = |v: &Value| -> Decimal { v.as_str().and_then(|s| s.parse().ok()).unwrap_or_else(|| panic!("not a decimal: {v}")) };
    let mut per_task = Vec::new();
    for t in report["tasks"].as_array().unwrap() {
        let events = read_transcript(Path::new(t["transcript"].as_str().unwrap())).map_err(|e| e.to_string())?;
        let (logged, oracle, _) = logged_costs(&events);
        ensure!(dec(&t["cost"]) == logged && logged == oracle, "task {} cost {} vs logged {logged} vs priced {oracle}", t["id"], t["cost"]);
        per_task.push(logged);
    }
    Ok((dec(&report["total_cost"]), per_task))
}

fn cost_ledger(rt: &tokio::runtime::Runtime) -> Check {
    let dir = tempfile::tempdir().unwrap();
    let llm = scripted(&[GOAL_OK, "I think we should print x", AWAIT_OK, END_STEP, FULFIL]);
    let (session, r) = rt
        .block_on(run_task("Make x", config(dir.path()), deps(llm, sim_kernel(dir.path())), TranscriptLog::in_memory()))
        .map_err(|e| e.to_string())?;
    let (logged, oracle, calls) = logged_costs(&r.transcript);
    ensure!(calls == 5, "{calls} calls logged; the parse retry must be one of them");
    ensure!(logged > Decimal::ZERO, "nothing was priced");
    ensure!(r.session_cost == logged && logged == oracle, "session {} vs logged {logged} vs priced {oracle}", r.session_cost);
    ensure!(session.cost_total() == r.session_cost, "ledger total {}", session.cost_total());

    // Batches add up: {a} + {b} == {a, b}.
    let root = tempfile::tempdir().unwrap();
    let config = write_config(root.path(), &root.path().join("unused.json"));
    let (a, _) = bench_total(&["a"], root.path(), &config)?;
    let (b, _) = bench_total(&["b"], root.path(), &config)?;
    let (ab, parts) = bench_total(&["a", "b"], root.path(), &config)?;
    ensure!(ab == a + b, "batch total {ab} != {a} + {b}");
    ensure!(ab == parts.iter().copied().sum::<Decimal>(), "batch total {ab} != sum of tasks {parts:?}");
    Ok(())
}
