//! Append-only session event log.
//!
//! One JSON object per line: `{seq, wall_clock, type, payload}`. The same
//! frames feed the live event stream, replay, statistics and notebook export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::broadcast;

use crate::cell::{Cell, CellId, CellOutput, Signal};
use crate::fst::{compute_resume, next_state, AgentState, Counters, ErrorDetail, Feedback, FeedbackKind, ForcedMove, ResumeTarget};
use crate::llm::{CostEntry, CostLedger, LlmReply, LlmRequest, PriceTable, RecordedCall, Usage};
use crate::trajectory::{NodeId, TreeOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallPurpose {
    Agent,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserInputEvent {
    pub index: u32,
    pub text: String,
    /// The instruction as it appears in the notebook.
    pub cell: Cell,
    /// Session preamble, recorded with the first input.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub preamble: Vec<Cell>,
    /// Effective configuration, echoed on the first input of a session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tree_ops: Vec<TreeOp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmCallEvent {
    pub purpose: CallPurpose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<AgentState>,
    /// 0 for the first attempt at a turn, then one per parse retry.
    pub attempt: u32,
    pub model: String,
    pub request_hash: String,
    pub reply: String,
    pub usage: Usage,
    pub cost: Decimal,
    #[serde(default)]
    pub retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEvent {
    pub stage: AgentState,
    pub signal: Signal,
    pub cells: Vec<Cell>,
    /// Produced by the engine (budget or parse fallback), not the model.
    #[serde(default)]
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell_id: CellId,
    pub outputs: Vec<CellOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionEvent {
    pub stage: AgentState,
    pub results: Vec<CellResult>,
    pub feedback: Feedback,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted_at_cell: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tree_ops: Vec<TreeOp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionTrigger {
    UserInput,
    Action,
    Abort,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionEvent {
    pub from: AgentState,
    pub to: AgentState,
    pub trigger: TransitionTrigger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<Signal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<ResumeTarget>,
    /// Set when a budget rule overrode the unforced target.
    #[serde(default)]
    pub forced: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairKind {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcomeEvent {
    pub kind: RepairKind,
    pub failed_node: NodeId,
    pub episode_turns: u32,
    pub resolved_error: ErrorDetail,
    /// The episode ended on a budget or fallback rather than model choice.
    pub forced: bool,
    pub cells: Vec<Cell>,
    pub resume: ResumeTarget,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tree_ops: Vec<TreeOp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Fulfilled,
    BudgetStop,
    Timeout,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEvent {
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Final summary cells, or the stop note when a budget ended the task.
    pub summary: Vec<Cell>,
    pub counters: Counters,
    pub cost_total: Decimal,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    UserInput(UserInputEvent),
    LlmCall(LlmCallEvent),
    Action(ActionEvent),
    Execution(ExecutionEvent),
    Transition(TransitionEvent),
    Forced(ForcedMove),
    RepairOutcome(RepairOutcomeEvent),
    Final(FinalEvent),
}

impl EventBody {
    pub fn type_name(&self) -> &'static str {
        match self {
            EventBody::UserInput(_) => "user_input",
            EventBody::LlmCall(_) => "llm_call",
            EventBody::Action(_) => "action",
            EventBody::Execution(_) => "execution",
            EventBody::Transition(_) => "transition",
            EventBody::Forced(_) => "forced",
            EventBody::RepairOutcome(_) => "repair_outcome",
            EventBody::Final(_) => "final",
        }
    }

    pub fn tree_ops(&self) -> &[TreeOp] {
        match self {
            EventBody::UserInput(e) => &e.tree_ops,
            EventBody::Execution(e) => &e.tree_ops,
            EventBody::RepairOutcome(e) => &e.tree_ops,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub wall_clock: String,
    #[serde(flatten)]
    pub body: EventBody,
}

impl Event {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("event {seq}: {message}")]
    Invalid { seq: u64, message: String },
}

struct LogInner {
    events: Vec<Event>,
    sink: Option<BufWriter<File>>,
}

/// Shared append-only log with a live broadcast tail.
pub struct TranscriptLog {
    inner: Mutex<LogInner>,
    tx: broadcast::Sender<Event>,
}

impl std::fmt::Debug for TranscriptLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TranscriptLog").field("len", &self.len()).finish()
    }
}

impl TranscriptLog {
    pub fn in_memory() -> Arc<Self> {
        Self::with_sink(None, Vec::new())
    }

    /// Logs to `path`, truncating it.
    pub fn create(path: &Path) -> Result<Arc<Self>, TranscriptError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Self::with_sink(Some(BufWriter::new(File::create(path)?)), Vec::new()))
    }

    /// Continues an existing transcript, appending new events to `path`.
    pub fn resume(path: &Path, prior: Vec<Event>) -> Result<Arc<Self>, TranscriptError> {
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self::with_sink(Some(BufWriter::new(file)), prior))
    }

    fn with_sink(sink: Option<BufWriter<File>>, events: Vec<Event>) -> Arc<Self> {
        let (tx, _) = broadcast::channel(1024);
        Arc::new(Self {
            inner: Mutex::new(LogInner { events, sink }),
            tx,
        })
    }

    pub fn append(&self, body: EventBody) -> Event {
        let mut inner = self.inner.lock().expect("poisoned");
        let event = Event {
            seq: inner.events.len() as u64,
            wall_clock: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            body,
        };
        if let Some(sink) = inner.sink.as_mut() {
            // Flushed per line so the file survives aborts.
            let ok = writeln!(sink, "{}", event.to_line()).and_then(|_| sink.flush());
            if let Err(e) = ok {
                tracing::error!(error = %e, "transcript write failed");
            }
        }
        inner.events.push(event.clone());
        let _ = self.tx.send(event.clone());
        event
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("poisoned").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.inner.lock().expect("poisoned").events.clone()
    }

    /// Events with `seq >= since` plus a receiver for everything after them,
    /// taken atomically so the two never overlap or leave a gap.
    pub fn subscribe_from(&self, since: u64) -> (Vec<Event>, broadcast::Receiver<Event>) {
        let inner = self.inner.lock().expect("poisoned");
        let rx = self.tx.subscribe();
        let history = inner.events.iter().skip(since as usize).cloned().collect();
        (history, rx)
    }
}

/// Logs model calls and keeps the session cost ledger in step with them.
#[derive(Debug)]
pub struct CallRecorder {
    log: Arc<TranscriptLog>,
    prices: PriceTable,
    ledger: Mutex<CostLedger>,
    /// Models already warned about for lacking a price.
    unpriced: Mutex<std::collections::HashSet<String>>,
}

impl CallRecorder {
    pub fn new(log: Arc<TranscriptLog>, prices: PriceTable) -> Self {
        Self {
            log,
            prices,
            ledger: Mutex::new(CostLedger::new()),
            unpriced: Mutex::default(),
        }
    }

    pub fn log(&self) -> &Arc<TranscriptLog> {
        &self.log
    }

    /// Appends the llm_call event and books its cost. Models without a
    /// configured price cost zero.
    pub fn record(
        &self,
        purpose: CallPurpose,
        stage: Option<AgentState>,
        attempt: u32,
        request: &LlmRequest,
        reply: &LlmReply,
        parse_error: Option<String>,
    ) -> Decimal {
        let cost = self.prices.accumulate_cost(&request.model, &reply.usage).unwrap_or_else(|_| {
            if self.unpriced.lock().expect("poisoned").insert(request.model.clone()) {
                tracing::warn!(model = %request.model, "no price configured; cost booked as zero");
            }
            Decimal::ZERO
        });
        self.ledger.lock().expect("poisoned").push(CostEntry {
            model: request.model.clone(),
            usage: reply.usage,
            cost,
        });
        self.log.append(EventBody::LlmCall(LlmCallEvent {
            purpose,
            stage,
            attempt,
            model: request.model.clone(),
            request_hash: request.hash(),
            reply: reply.text.clone(),
            usage: reply.usage,
            cost,
            retries: reply.retries,
            parse_error,
        }));
        cost
    }

    pub fn ledger(&self) -> CostLedger {
        self.ledger.lock().expect("poisoned").clone()
    }

    pub fn total(&self) -> Decimal {
        self.ledger.lock().expect("poisoned").total()
    }
}

pub fn read_transcript(path: &Path) -> Result<Vec<Event>, TranscriptError> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(&line).map_err(|e| TranscriptError::Corrupt {
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

pub fn write_transcript(path: &Path, events: &[Event]) -> Result<(), TranscriptError> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in events {
        writeln!(w, "{}", e.to_line())?;
    }
    w.flush()?;
    Ok(())
}

/// Keys whose values legitimately differ between otherwise identical runs.
const VOLATILE_KEYS: [&str; 3] = ["wall_clock", "elapsed_ms", "retries"];

/// Drops timing fields at any depth.
pub fn normalize(value: &Value) -> Value {
    match value {
        Value::Object(map) => Value::Object(
            map.iter()
                .filter(|(k, _)| !VOLATILE_KEYS.contains(&k.as_str()))
                .map(|(k, v)| (k.clone(), normalize(v)))
                .collect(),
        ),
        Value::Array(items) => Value::Array(items.iter().map(normalize).collect()),
        other => other.clone(),
    }
}

/// Normalized JSONL rendering of a transcript.
pub fn normalized_lines(events: &[Event]) -> Vec<String> {
    events
        .iter()
        .map(|e| {
            let v = serde_json::to_value(e).expect("events serialize");
            crate::llm::canonical_json(&normalize(&v))
        })
        .collect()
}

/// First index where two transcripts differ after normalization.
pub fn first_difference(a: &[Event], b: &[Event]) -> Option<usize> {
    let (la, lb) = (normalized_lines(a), normalized_lines(b));
    (0..la.len().max(lb.len())).find(|&i| la.get(i) != lb.get(i))
}

/// Recorded model calls in order, for a replay provider.
pub fn recorded_calls(events: &[Event]) -> Vec<RecordedCall> {
    events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::LlmCall(c) => Some(RecordedCall {
                request_hash: c.request_hash.clone(),
                reply: c.reply.clone(),
                usage: c.usage,
            }),
            _ => None,
        })
        .collect()
}

/// All tree operations in order.
pub fn tree_ops(events: &[Event]) -> Vec<TreeOp> {
    events.iter().flat_map(|e| e.body.tree_ops().iter().cloned()).collect()
}

/// Notebook-order cells rebuilt from events: preamble, then each
/// instruction with its visible trajectory and, once finished, its summary.
/// Works on a prefix of a running session.
pub fn notebook_trace(events: &[Event]) -> Result<Vec<Cell>, TranscriptError> {
    let mut tree = crate::trajectory::TrajectoryTree::new();
    let mut preamble = Vec::new();
    let mut instructions: Vec<(Cell, Vec<Cell>)> = Vec::new();
    for e in events {
        for op in e.body.tree_ops() {
            tree.apply(op).map_err(|err| TranscriptError::Invalid {
                seq: e.seq,
                message: err.to_string(),
            })?;
        }
        match &e.body {
            EventBody::UserInput(u) => {
                if u.config.is_some() {
                    preamble = u.preamble.clone();
                }
                instructions.push((u.cell.clone(), Vec::new()));
            }
            EventBody::Final(f) => {
                if let Some(last) = instructions.last_mut() {
                    last.1 = f.summary.clone();
                }
            }
            _ => {}
        }
    }
    let mut out = preamble;
    for (i, (cell, summary)) in instructions.into_iter().enumerate() {
        out.push(cell);
        out.extend(tree.visible_cells(i as u32).into_iter().cloned());
        out.extend(summary);
    }
    Ok(out)
}

/// Whether the echoed config disabled repair.
fn repair_disabled(events: &[Event]) -> bool {
    events.iter().find_map(|e| match &e.body {
        EventBody::UserInput(u) => u.config.as_ref(),
        _ => None,
    })
    .and_then(|c| c.pointer("/ablations/disable_repair"))
    .and_then(Value::as_bool)
    .unwrap_or(false)
}

/// Checks sequence numbering and that every transition follows the machine.
///
/// Unforced targets are recomputed from `(from, signal, feedback, resume)`;
/// the `forced` events preceding a transition must chain from that target to
/// the recorded one.
pub fn validate_transcript(events: &[Event]) -> Result<(), TranscriptError> {
    let skip_repair = repair_disabled(events);
    let mut state = AgentState::Idle;
    let mut pending_forced: Vec<&ForcedMove> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let invalid = |message: String| TranscriptError::Invalid { seq: e.seq, message };
        if e.seq != i as u64 {
            return Err(invalid(format!("expected seq {i}")));
        }
        match &e.body {
            EventBody::Forced(f) => pending_forced.push(f),
            EventBody::Transition(t) => {
                if t.from != state {
                    return Err(invalid(format!("transition from {} but machine is in {}", t.from, state)));
                }
                let intended = match t.trigger {
                    TransitionTrigger::UserInput => {
                        if t.from != AgentState::Idle {
                            return Err(invalid("user input outside idle".into()));
                        }
                        AgentState::Plan
                    }
                    TransitionTrigger::Action => {
                        let (Some(sigma), Some(f)) = (t.signal, t.feedback) else {
                            return Err(invalid("action transition without signal and feedback".into()));
                        };
                        if skip_repair && f == FeedbackKind::Error && matches!(t.from, AgentState::Plan | AgentState::Exec) {
                            compute_resume(t.from, sigma).map_err(|e| invalid(e.to_string()))?.into()
                        } else {
                            next_state(t.from, sigma, f, t.resume).map_err(|e| invalid(e.to_string()))?
                        }
                    }
                    TransitionTrigger::Abort | TransitionTrigger::Timeout => t.to,
                };
                let mut reached = intended;
                for f in pending_forced.drain(..) {
                    if f.intended != reached {
                        return Err(invalid(format!("forced move from {} but target was {}", f.intended, reached)));
                    }
                    reached = f.forced_to;
                }
                if reached != t.to {
                    return Err(invalid(format!("expected {} but transcript records {}", reached, t.to)));
                }
                if t.forced != (reached != intended) {
                    return Err(invalid("forced flag does not match forced moves".into()));
                }
                state = t.to;
            }
            _ => {}
        }
    }
    if !pending_forced.is_empty() {
        return Err(TranscriptError::Invalid {
            seq: events.len() as u64,
            message: "forced move without a transition".into(),
        });
    }
    Ok(())
}
