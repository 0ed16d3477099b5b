//! The generate, execute, transition loop for one session.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cell::{
    find_step_goal, parse_action_with, Action, ActionSignal, Cell, CellIdGen, OriginStage, ParseError, ParseOptions,
    Signal, SignalAliasTable, TruncationPolicy, DEFAULT_LANGUAGE_TAG,
};
use crate::executor::{ExecError, ExecResult, Kernel, ToolHost};
use crate::fst::{
    admissible_signals, apply_budgets, compute_resume, next_state, AgentState, Budgets, Counters, ErrorDetail,
    Feedback, FeedbackKind, ResumeTarget,
};
use crate::llm::{ChatMessage, LlmError, LlmProvider, LlmRequest, PriceTable};
use crate::prompts::{PromptCatalog, PromptKind};
use crate::toolkit::{initialize_tools, EnvInfo, Preamble, SessionTools, ToolDescriptor, DEFAULT_GLOBAL_CNT, DEFAULT_JUDGE_MODEL};
use crate::trajectory::{assemble_context, ContextHistory, NodeId, SpliceOutcome, TreeOp, ROOT};
use crate::transcript::{
    tree_ops, ActionEvent, CallPurpose, CallRecorder, CellResult, Event, EventBody, ExecutionEvent, FinalEvent,
    Outcome, RepairKind, RepairOutcomeEvent, TranscriptLog, TransitionEvent, TransitionTrigger, UserInputEvent,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub disable_planning: bool,
    pub disable_repair: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub model: String,
    pub temperature: f64,
    pub budgets: Budgets,
    pub code_tag: String,
    #[serde(skip)]
    pub workdir: PathBuf,
    pub ablations: Ablations,
    /// Wall-clock limit for one instruction.
    pub task_timeout_secs: f64,
    /// Limit for one action's execution; the remaining task time caps it too.
    pub action_timeout_secs: f64,
    pub retry_on_parse_error: u32,
    /// Failed validations of cleaned code that may reopen debugging.
    pub max_revalidations: u32,
    pub truncation: TruncationPolicy,
    pub judge_model: String,
    pub visual_budget: u32,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o".into(),
            temperature: 0.0,
            budgets: Budgets::default(),
            code_tag: DEFAULT_LANGUAGE_TAG.into(),
            workdir: PathBuf::from("."),
            ablations: Ablations::default(),
            task_timeout_secs: 3600.0,
            action_timeout_secs: 600.0,
            retry_on_parse_error: 2,
            max_revalidations: 1,
            truncation: TruncationPolicy::default(),
            judge_model: DEFAULT_JUDGE_MODEL.into(),
            visual_budget: DEFAULT_GLOBAL_CNT,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: &str| Err(SessionError::Config(m.to_string()));
        if self.model.trim().is_empty() {
            return bad("model must be set");
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if !(self.task_timeout_secs > 0.0) || !(self.action_timeout_secs > 0.0) {
            return bad("timeouts must be > 0");
        }
        self.budgets.validate().map_err(|e| SessionError::Config(e.to_string()))
    }

    fn task_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.task_timeout_secs)
    }
}

/// Collaborators a session drives.
#[derive(Clone)]
pub struct Deps {
    pub llm: Arc<dyn LlmProvider>,
    pub kernel: Arc<dyn Kernel>,
    pub prompts: Arc<PromptCatalog>,
    pub prices: PriceTable,
    pub tools: Vec<ToolDescriptor>,
    /// Extra config recorded in the transcript echo, such as the backend.
    pub echo_extra: Value,
}

impl std::fmt::Debug for Deps {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Deps")
            .field("llm", &self.llm.name())
            .field("kernel", self.kernel.info())
            .field("tools", &self.tools.len())
            .finish()
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("session is dead")]
    SessionDead,
    #[error("executor: {0}")]
    Executor(#[from] ExecError),
    #[error("toolkit: {0}")]
    Toolkit(#[from] crate::toolkit::ToolkitError),
    #[error("transcript: {0}")]
    Transcript(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub outcome: Outcome,
    pub reason: Option<String>,
    pub counters: Counters,
    /// Cost of this instruction and of the whole session so far.
    pub task_cost: Decimal,
    pub session_cost: Decimal,
    pub elapsed: Duration,
    /// Preamble followed by the visible trace.
    pub context: Vec<Cell>,
    pub summary: Vec<Cell>,
    pub transcript: Vec<Event>,
}

/// Why a task's loop stopped before reaching idle normally.
#[derive(Debug, Clone)]
struct Halt {
    outcome: Outcome,
    reason: Option<String>,
}

impl Halt {
    fn new(outcome: Outcome, reason: impl Into<String>) -> Self {
        Self {
            outcome,
            reason: Some(reason.into()),
        }
    }
}

enum TurnError {
    ParseExhausted(ParseError),
    Halt(Halt),
}

pub const FORMAT_REMINDER: &str = "Your previous response could not be used";

pub struct Session {
    config: SessionConfig,
    deps: Deps,
    log: Arc<TranscriptLog>,
    recorder: Arc<CallRecorder>,
    tools: Arc<SessionTools>,
    history: ContextHistory,
    ids: CellIdGen,
    counters: Counters,
    state: AgentState,
    aliases: SignalAliasTable,
    echoed: bool,
    dead: bool,
    task_start: Instant,
    last_outcome: Option<Outcome>,
    /// Summary cells from the `Fulfil` action that ended the task.
    fulfil_summary: Vec<Cell>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("state", &self.state)
            .field("counters", &self.counters)
            .field("dead", &self.dead)
            .finish()
    }
}

impl Session {
    /// Opens a session: builds the preamble and runs tool setup.
    pub async fn start(config: SessionConfig, deps: Deps, log: Arc<TranscriptLog>) -> Result<Self, SessionError> {
        config.validate()?;
        let mut session = Self::bare(config, deps, log, Vec::new());
        let env = EnvInfo::scan(
            &session.config.code_tag,
            kernel_label(session.deps.kernel.as_ref()),
            &session.config.workdir,
        );
        let host: Arc<dyn ToolHost> = session.tools.clone();
        let preamble: Preamble = initialize_tools(
            &session.deps.tools,
            &env,
            session.deps.kernel.as_ref(),
            Some(host),
            Duration::from_secs_f64(session.config.action_timeout_secs),
            &mut session.ids,
        )
        .await?;
        session.tools.set_enabled(preamble.enabled.clone());
        session.history = ContextHistory::new(preamble.cells);
        Ok(session)
    }

    fn bare(config: SessionConfig, deps: Deps, log: Arc<TranscriptLog>, preamble: Vec<Cell>) -> Self {
        let recorder = Arc::new(CallRecorder::new(log.clone(), deps.prices.clone()));
        let tools = Arc::new(SessionTools::new(
            config.workdir.clone(),
            deps.llm.clone(),
            config.judge_model.clone(),
            config.visual_budget,
            Some(recorder.clone()),
        ));
        tools.set_enabled(Vec::new());
        Self {
            config,
            deps,
            log,
            recorder,
            tools,
            history: ContextHistory::new(preamble),
            ids: CellIdGen::new(),
            counters: Counters::default(),
            state: AgentState::Idle,
            aliases: SignalAliasTable::default(),
            echoed: false,
            dead: false,
            task_start: Instant::now(),
            last_outcome: None,
            fulfil_summary: Vec::new(),
        }
    }

    /// Rebuilds a session from its transcript and re-runs the visible code
    /// on `deps.kernel` so interpreter state matches the trace. Events are
    /// appended to `log`, which should already hold `events`.
    pub async fn restore(
        config: SessionConfig,
        deps: Deps,
        log: Arc<TranscriptLog>,
        events: &[Event],
    ) -> Result<Self, SessionError> {
        config.validate()?;
        let bad = |m: String| SessionError::Transcript(m);
        let mut preamble = Vec::new();
        let mut enabled = None;
        let mut history_instructions = Vec::new();
        let mut max_id = 0u64;
        let mut last_final: Option<&FinalEvent> = None;
        for e in events {
            match &e.body {
                EventBody::UserInput(u) => {
                    if u.config.is_some() {
                        preamble = u.preamble.clone();
                        enabled = u
                            .config
                            .as_ref()
                            .and_then(|c| c.get("tools_enabled"))
                            .and_then(|v| serde_json::from_value::<Vec<String>>(v.clone()).ok());
                    }
                    history_instructions.push(u.cell.clone());
                }
                EventBody::Final(f) => last_final = Some(f),
                _ => {}
            }
            max_id = max_id.max(max_cell_number(&e.body));
        }
        if history_instructions.is_empty() {
            return Err(bad("transcript has no instructions".into()));
        }
        let Some(last) = last_final else {
            return Err(bad("last instruction never finished".into()));
        };
        if last.outcome == Outcome::Aborted {
            return Err(SessionError::SessionDead);
        }
        let finals: Vec<&FinalEvent> = events
            .iter()
            .filter_map(|e| match &e.body {
                EventBody::Final(f) => Some(f),
                _ => None,
            })
            .collect();
        if finals.len() != history_instructions.len() {
            return Err(bad("instruction without a final event".into()));
        }
        let mut session = Self::bare(config, deps, log, preamble);
        session.tools.set_enabled(enabled.unwrap_or_default());
        for (cell, f) in history_instructions.into_iter().zip(&finals) {
            session.history.instructions.push(crate::trajectory::InstructionRecord {
                cell,
                summary: f.summary.clone(),
            });
        }
        let ops = tree_ops(events);
        session.history.tree =
            crate::trajectory::TrajectoryTree::from_ops(ops.iter()).map_err(|e| bad(e.to_string()))?;
        session.counters = last.counters;
        session.ids = CellIdGen::starting_at(max_id);
        session.echoed = true;
        session.last_outcome = Some(last.outcome);

        // Replays code to rebuild interpreter state. Errors are expected
        // where the original run also failed.
        let code: Vec<Cell> = session
            .history
            .preamble()
            .iter()
            .chain(session.history.tree.all_visible_cells())
            .filter(|c| c.is_code())
            .cloned()
            .collect();
        let host: Arc<dyn ToolHost> = session.tools.clone();
        let timeout = Duration::from_secs_f64(session.config.action_timeout_secs);
        for cell in code {
            session
                .deps
                .kernel
                .execute_cells(std::slice::from_ref(&cell), timeout, Some(host.clone()))
                .await?;
        }
        Ok(session)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn history(&self) -> &ContextHistory {
        &self.history
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn state(&self) -> AgentState {
        self.state
    }

    pub fn log(&self) -> &Arc<TranscriptLog> {
        &self.log
    }

    pub fn kernel(&self) -> &Arc<dyn Kernel> {
        &self.deps.kernel
    }

    pub fn tools(&self) -> &Arc<SessionTools> {
        &self.tools
    }

    pub fn is_dead(&self) -> bool {
        self.dead
    }

    pub fn cost_total(&self) -> Decimal {
        self.recorder.total()
    }

    /// Preamble and visible trace in notebook order.
    pub fn notebook_cells(&self) -> Vec<Cell> {
        self.history
            .preamble()
            .iter()
            .chain(self.history.trace_cells())
            .cloned()
            .collect()
    }

    /// Runs one instruction until the machine returns to idle.
    pub async fn run_instruction(&mut self, text: &str) -> Result<SessionResult, SessionError> {
        if text.trim().is_empty() {
            return Err(SessionError::EmptyInstruction);
        }
        if self.dead || self.last_outcome == Some(Outcome::Aborted) || !self.deps.kernel.is_alive() {
            return Err(SessionError::SessionDead);
        }
        self.task_start = Instant::now();
        let cost_before = self.recorder.total();
        self.counters.exec_entries_current_step = 0;
        self.counters.debug_attempts_current_episode = 0;
        self.tools.reset();
        self.fulfil_summary.clear();
        self.history.repair_turns.clear();

        let index = self.history.push_instruction(text.trim(), &mut self.ids);
        let cell = self.history.instructions[index as usize].cell.clone();
        let entered = self.transition(AgentState::Idle, None, None, None, AgentState::Plan, TransitionTrigger::UserInput);
        let (config, preamble) = if self.echoed {
            (None, Vec::new())
        } else {
            self.echoed = true;
            (Some(self.config_echo()), self.history.preamble().to_vec())
        };
        self.log.append(EventBody::UserInput(UserInputEvent {
            index,
            text: text.trim().to_string(),
            cell,
            preamble,
            config,
            tree_ops: vec![TreeOp::BeginInstruction { index }],
        }));

        let halt = match entered {
            Err(h) => h,
            Ok(_) => match self.drive().await {
                Err(h) => h,
                Ok(()) => Halt {
                    outcome: Outcome::Fulfilled,
                    reason: None,
                },
            },
        };
        Ok(self.finish(index, halt, cost_before))
    }

    async fn drive(&mut self) -> Result<(), Halt> {
        loop {
            self.check_deadline()?;
            match self.state {
                AgentState::Idle => return Ok(()),
                AgentState::Plan | AgentState::Exec => self.turn().await?,
                other => unreachable!("repair states are handled inside an episode, found {other}"),
            }
        }
    }

    fn remaining(&self) -> Duration {
        self.config.task_timeout().saturating_sub(self.task_start.elapsed())
    }

    fn check_deadline(&self) -> Result<(), Halt> {
        if self.remaining().is_zero() {
            Err(Halt::new(
                Outcome::Timeout,
                format!("time limit of {}s reached", self.config.task_timeout_secs),
            ))
        } else {
            Ok(())
        }
    }

    /// One plan or exec turn, including any repair it triggers.
    async fn turn(&mut self) -> Result<(), Halt> {
        let stage = self.state;
        let action = match self.generate_turn(stage).await {
            Ok(a) => a,
            Err(TurnError::Halt(h)) => return Err(h),
            Err(TurnError::ParseExhausted(e)) if stage == AgentState::Exec => {
                tracing::warn!(error = %e, "exec reply unusable; ending the step");
                self.synthetic_action(stage, Signal::EndStep, Vec::new())
            }
            Err(TurnError::ParseExhausted(e)) => {
                return Err(Halt::new(Outcome::Aborted, format!("no usable {stage} reply: {e}")))
            }
        };
        let signal = action.signal.canonical;
        let mut cells = action.cells;
        let result = self.execute(&mut cells).await?;
        let feedback = result.feedback.clone();
        let repair = feedback.is_error() && !self.config.ablations.disable_repair;
        let mut event = execution_event(stage, &result, &cells, None, Vec::new());

        let mut ops = Vec::new();
        let node = match (stage, signal) {
            (AgentState::Plan, Signal::AdvanceNextStep | Signal::IterateCurrentStep) => {
                let goal = find_step_goal(&cells).map(|(_, g)| g).unwrap_or_default();
                let op = if signal == Signal::AdvanceNextStep {
                    TreeOp::Advance { goal, cells }
                } else {
                    TreeOp::Replace { goal, cells }
                };
                self.counters.exec_entries_current_step = 0;
                self.apply_op(&mut ops, op)
            }
            (AgentState::Plan, _) => {
                self.fulfil_summary = cells;
                None
            }
            (_, _) if cells.is_empty() => None,
            _ => self.apply_op(&mut ops, TreeOp::ExecTurn { signal, cells }),
        };
        if let (true, Some(n)) = (repair, node) {
            self.apply_op(&mut ops, TreeOp::MarkError { node: n });
        }
        self.counters.nonroot_nodes = self.history.tree.count_nonroot();
        event.node = node;
        event.tree_ops = ops;
        self.log.append(EventBody::Execution(event));
        self.check_deadline()?;

        match (feedback, node) {
            (Feedback::Error(detail), Some(n)) if repair => self.repair_episode(stage, signal, n, detail).await,
            (f, _) => {
                let fk = f.kind();
                let intended = if fk == FeedbackKind::Error && matches!(stage, AgentState::Plan | AgentState::Exec) {
                    // Repair disabled: keep the raw error and move on.
                    compute_resume(stage, signal).expect("plan/exec origin").into()
                } else {
                    next_state(stage, signal, fk, None).expect("parsed signals are admissible")
                };
                self.transition(stage, Some(signal), Some(fk), None, intended, TransitionTrigger::Action)?;
                Ok(())
            }
        }
    }

    fn apply_op(&mut self, ops: &mut Vec<TreeOp>, op: TreeOp) -> Option<NodeId> {
        match self.history.tree.apply(&op) {
            Ok(node) => {
                ops.push(op);
                node
            }
            Err(e) => {
                tracing::error!(error = %e, "tree operation rejected");
                None
            }
        }
    }

    async fn repair_episode(
        &mut self,
        origin: AgentState,
        origin_signal: Signal,
        failed: NodeId,
        error: ErrorDetail,
    ) -> Result<(), Halt> {
        let resume = compute_resume(origin, origin_signal).expect("plan/exec origin");
        self.open_episode();
        self.transition(
            origin,
            Some(origin_signal),
            Some(FeedbackKind::Error),
            None,
            AgentState::Debug,
            TransitionTrigger::Action,
        )?;
        let mut revalidations = 0;
        let mut episode_turns = 0;
        let mut forced = false;
        loop {
            self.check_deadline()?;
            if self.state == AgentState::Debug {
                let action = match self.generate_turn(AgentState::Debug).await {
                    Ok(a) => a,
                    Err(TurnError::Halt(h)) => return Err(h),
                    Err(TurnError::ParseExhausted(e)) => {
                        tracing::warn!(error = %e, "debug reply unusable; ending the episode");
                        forced = true;
                        self.synthetic_action(AgentState::Debug, Signal::EndDebug, Vec::new())
                    }
                };
                episode_turns += 1;
                let signal = action.signal.canonical;
                let mut cells = action.cells;
                let result = self.execute(&mut cells).await?;
                self.log
                    .append(EventBody::Execution(execution_event(AgentState::Debug, &result, &cells, None, Vec::new())));
                self.history.repair_turns.extend(cells);
                self.check_deadline()?;
                let fk = result.feedback.kind();
                let intended = next_state(AgentState::Debug, signal, fk, None).expect("admissible");
                let entered =
                    self.transition(AgentState::Debug, Some(signal), Some(fk), None, intended, TransitionTrigger::Action)?;
                forced |= entered != intended;
                continue;
            }

            let action = match self.generate_turn(AgentState::Filter).await {
                Ok(a) => a,
                Err(TurnError::Halt(h)) => return Err(h),
                Err(TurnError::ParseExhausted(e)) => {
                    forced = true;
                    let report = self.auto_report(&error, &format!("the post-filtering reply was unusable ({e})"));
                    self.synthetic_action(AgentState::Filter, Signal::DebugFailure, vec![report])
                }
            };
            let (signal, outcome) = if action.signal.canonical == Signal::DebugSuccess {
                let mut cells = action.cells;
                let result = self.execute(&mut cells).await?;
                self.log
                    .append(EventBody::Execution(execution_event(AgentState::Filter, &result, &cells, None, Vec::new())));
                self.check_deadline()?;
                match result.feedback {
                    Feedback::NoError => (Signal::DebugSuccess, SpliceOutcome::Success { cells }),
                    Feedback::Error(_) if revalidations < self.config.max_revalidations => {
                        revalidations += 1;
                        self.history.repair_turns.extend(cells);
                        self.open_episode();
                        self.transition(
                            AgentState::Filter,
                            Some(Signal::DebugSuccess),
                            Some(FeedbackKind::Error),
                            None,
                            AgentState::Debug,
                            TransitionTrigger::Action,
                        )?;
                        continue;
                    }
                    Feedback::Error(d) => {
                        forced = true;
                        let report = self.auto_report(
                            &error,
                            &format!("the cleaned code failed validation again ({}: {})", d.name, d.value),
                        );
                        let synth = self.synthetic_action(AgentState::Filter, Signal::DebugFailure, vec![report]);
                        (Signal::DebugFailure, SpliceOutcome::Failure { report: synth.cells[0].clone() })
                    }
                }
            } else {
                let report = merge_report(action.cells, &mut self.ids).unwrap_or_else(|| {
                    forced = true;
                    self.auto_report(&error, "no report was provided")
                });
                (Signal::DebugFailure, SpliceOutcome::Failure { report })
            };

            let (kind, cells) = match &outcome {
                SpliceOutcome::Success { cells } => (RepairKind::Success, cells.clone()),
                SpliceOutcome::Failure { report } => (RepairKind::Failure, vec![report.clone()]),
            };
            let mut ops = Vec::new();
            self.apply_op(&mut ops, TreeOp::Splice { node: failed, outcome });
            self.history.repair_turns.clear();
            self.counters.nonroot_nodes = self.history.tree.count_nonroot();
            self.log.append(EventBody::RepairOutcome(RepairOutcomeEvent {
                kind,
                failed_node: failed,
                episode_turns,
                resolved_error: error.clone(),
                forced,
                cells,
                resume,
                tree_ops: ops,
            }));
            let intended = next_state(AgentState::Filter, signal, FeedbackKind::NoError, Some(resume)).expect("admissible");
            self.transition(
                AgentState::Filter,
                Some(signal),
                Some(FeedbackKind::NoError),
                Some(resume),
                intended,
                TransitionTrigger::Action,
            )?;
            return Ok(());
        }
    }

    fn open_episode(&mut self) {
        self.counters.debug_attempts_current_episode = 0;
        self.counters.repair_episodes += 1;
    }

    fn auto_report(&mut self, error: &ErrorDetail, why: &str) -> Cell {
        Cell::markdown(
            self.ids.next_id(),
            format!(
                "[DEBUG REPORT]: The error `{}: {}` could not be resolved; {}. The failing code was removed from the notebook.",
                error.name, error.value, why
            ),
            OriginStage::Filter,
        )
    }

    /// An engine-made action, logged like a model action.
    fn synthetic_action(&mut self, stage: AgentState, signal: Signal, cells: Vec<Cell>) -> Action {
        let action = Action {
            signal: ActionSignal::implicit(signal),
            cells,
            stage,
        };
        self.log.append(EventBody::Action(ActionEvent {
            stage,
            signal,
            cells: action.cells.clone(),
            synthetic: true,
        }));
        action
    }

    /// Computes budgets for `intended`, logs the move and enters the result.
    fn transition(
        &mut self,
        from: AgentState,
        signal: Option<Signal>,
        feedback: Option<FeedbackKind>,
        resume: Option<ResumeTarget>,
        intended: AgentState,
        trigger: TransitionTrigger,
    ) -> Result<AgentState, Halt> {
        let decision = apply_budgets(intended, &self.counters, &self.config.budgets);
        for f in &decision.forced {
            self.log.append(EventBody::Forced(*f));
        }
        self.log.append(EventBody::Transition(TransitionEvent {
            from,
            to: decision.state,
            trigger,
            signal,
            feedback,
            resume,
            forced: decision.was_forced(),
        }));
        self.state = decision.state;
        match decision.state {
            AgentState::Plan => self.counters.planning_entries += 1,
            AgentState::Exec => self.counters.exec_entries_current_step += 1,
            AgentState::Debug => self.counters.debug_attempts_current_episode += 1,
            _ => {}
        }
        if decision.state == AgentState::Idle && decision.was_forced() {
            let rules: Vec<String> = decision
                .forced
                .iter()
                .map(|f| serde_json::to_value(f.rule).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
                .collect();
            return Err(Halt::new(Outcome::BudgetStop, format!("budget exhausted: {}", rules.join(", "))));
        }
        Ok(decision.state)
    }

    fn stage_admissible(&self, stage: AgentState, at_root: bool) -> Vec<Signal> {
        if at_root {
            return vec![Signal::AdvanceNextStep];
        }
        let all = admissible_signals(stage).expect("stage has signals");
        if stage == AgentState::Plan && self.config.ablations.disable_planning {
            return all.iter().copied().filter(|s| *s != Signal::IterateCurrentStep).collect();
        }
        all.to_vec()
    }

    /// Asks the model for an action, retrying with a format reminder.
    async fn generate_turn(&mut self, stage: AgentState) -> Result<Action, TurnError> {
        let at_root = stage == AgentState::Plan && self.history.tree.current() == ROOT;
        let kind = PromptKind::for_stage(stage, at_root).expect("non-idle stage");
        let goal = self.history.tree.current_goal().unwrap_or("").to_string();
        let prompt = self.deps.prompts.render(kind, self.history.current_instruction_text(), &goal);
        let mut messages = assemble_context(&self.history, stage, &prompt, &self.config.truncation);
        let admissible = self.stage_admissible(stage, at_root);
        let options = ParseOptions {
            code_tag: self.config.code_tag.clone(),
            implicit_signal: at_root.then_some(Signal::AdvanceNextStep),
        };
        let mut last_error = ParseError::NoSignalsForStage(stage);
        for attempt in 0..=self.config.retry_on_parse_error {
            let request = LlmRequest::new(&self.config.model, self.config.temperature, messages.clone());
            let remaining = self.remaining();
            let reply = match tokio::time::timeout(remaining, self.deps.llm.complete(&request)).await {
                Err(_) => {
                    return Err(TurnError::Halt(Halt::new(
                        Outcome::Timeout,
                        format!("time limit of {}s reached", self.config.task_timeout_secs),
                    )))
                }
                Ok(Err(e)) => return Err(TurnError::Halt(llm_halt(e))),
                Ok(Ok(r)) => r,
            };
            self.counters.llm_calls += 1;
            let parsed = parse_action_with(&reply.text, stage, &admissible, &self.aliases, &options)
                .and_then(|a| self.check_action(a, at_root));
            let parse_error = parsed.as_ref().err().map(ToString::to_string);
            self.recorder.record(CallPurpose::Agent, Some(stage), attempt, &request, &reply, parse_error);
            match parsed {
                Ok(mut action) => {
                    action.assign_ids(&mut self.ids);
                    self.log.append(EventBody::Action(ActionEvent {
                        stage,
                        signal: action.signal.canonical,
                        cells: action.cells.clone(),
                        synthetic: false,
                    }));
                    return Ok(action);
                }
                Err(e) => {
                    let tokens: Vec<&str> = admissible.iter().map(|s| s.prompt_token()).collect();
                    messages.push(ChatMessage::assistant(reply.text));
                    messages.push(ChatMessage::user(format!(
                        "{FORMAT_REMINDER} ({e}). Your response MUST start with one of: {}.",
                        tokens.join(", ")
                    )));
                    last_error = e;
                }
            }
        }
        Err(TurnError::ParseExhausted(last_error))
    }

    /// Stage rules beyond the signal grammar.
    fn check_action(&self, action: Action, at_root: bool) -> Result<Action, ParseError> {
        let signal = action.signal.canonical;
        if at_root || matches!(signal, Signal::AdvanceNextStep | Signal::IterateCurrentStep) {
            find_step_goal(&action.cells)?;
        }
        if signal == Signal::DebugSuccess && !action.has_code() {
            return Err(ParseError::MissingCode { signal });
        }
        Ok(action)
    }

    async fn execute(&mut self, cells: &mut [Cell]) -> Result<ExecResult, Halt> {
        if !cells.iter().any(Cell::is_code) {
            return Ok(ExecResult::empty(cells.len()));
        }
        let limit = Duration::from_secs_f64(self.config.action_timeout_secs).min(self.remaining());
        let host: Arc<dyn ToolHost> = self.tools.clone();
        match self.deps.kernel.execute_cells(cells, limit, Some(host)).await {
            Ok(result) => {
                result.attach_to(cells);
                Ok(result)
            }
            Err(e) => {
                self.dead = true;
                Err(Halt::new(Outcome::Aborted, format!("executor failed: {e}")))
            }
        }
    }

    fn finish(&mut self, index: u32, halt: Halt, cost_before: Decimal) -> SessionResult {
        if self.state != AgentState::Idle {
            let trigger = match halt.outcome {
                Outcome::Timeout => TransitionTrigger::Timeout,
                _ => TransitionTrigger::Abort,
            };
            self.log.append(EventBody::Transition(TransitionEvent {
                from: self.state,
                to: AgentState::Idle,
                trigger,
                signal: None,
                feedback: None,
                resume: None,
                forced: false,
            }));
            self.state = AgentState::Idle;
        }
        self.history.repair_turns.clear();
        if halt.outcome == Outcome::Aborted {
            self.dead = true;
        }
        let summary = match halt.outcome {
            Outcome::Fulfilled => std::mem::take(&mut self.fulfil_summary),
            _ => vec![Cell::markdown(
                self.ids.next_id(),
                format!(
                    "[STOPPED]: {}. The work above is incomplete.",
                    halt.reason.as_deref().unwrap_or("stopped")
                ),
                OriginStage::Plan,
            )],
        };
        self.history.instructions[index as usize].summary = summary.clone();
        self.last_outcome = Some(halt.outcome);
        let elapsed = self.task_start.elapsed();
        let session_cost = self.recorder.total();
        self.log.append(EventBody::Final(FinalEvent {
            outcome: halt.outcome,
            reason: halt.reason.clone(),
            summary: summary.clone(),
            counters: self.counters,
            cost_total: session_cost,
            elapsed_ms: elapsed.as_millis() as u64,
        }));
        SessionResult {
            outcome: halt.outcome,
            reason: halt.reason,
            counters: self.counters,
            task_cost: session_cost - cost_before,
            session_cost,
            elapsed,
            context: self.notebook_cells(),
            summary,
            transcript: self.log.snapshot(),
        }
    }

    fn config_echo(&self) -> Value {
        let mut echo = serde_json::to_value(&self.config).expect("config serializes");
        let obj = echo.as_object_mut().expect("config is an object");
        obj.insert("prompt_fingerprint".into(), Value::String(self.deps.prompts.fingerprint()));
        obj.insert(
            "tools".into(),
            serde_json::to_value(&self.deps.tools).expect("tools serialize"),
        );
        obj.insert("tools_enabled".into(), serde_json::to_value(self.tools.tool_names()).unwrap_or_default());
        obj.insert("prices".into(), serde_json::to_value(&self.deps.prices).unwrap_or_default());
        if let Value::Object(extra) = &self.deps.echo_extra {
            for (k, v) in extra {
                obj.insert(k.clone(), v.clone());
            }
        }
        echo
    }
}

fn llm_halt(e: LlmError) -> Halt {
    Halt::new(Outcome::Aborted, format!("model call failed: {e}"))
}

fn kernel_label(kernel: &dyn Kernel) -> &'static str {
    match kernel.info().backend {
        crate::executor::BackendKind::Local => "local Python",
        crate::executor::BackendKind::Gateway => "Jupyter kernel",
        crate::executor::BackendKind::Sim => "simulated Python",
    }
}

fn execution_event(
    stage: AgentState,
    result: &ExecResult,
    cells: &[Cell],
    node: Option<NodeId>,
    ops: Vec<TreeOp>,
) -> ExecutionEvent {
    let results = cells
        .iter()
        .zip(&result.outputs)
        .filter(|(c, _)| c.is_code())
        .map(|(c, o)| CellResult {
            cell_id: c.id.clone(),
            outputs: o.clone(),
        })
        .collect();
    ExecutionEvent {
        stage,
        results,
        feedback: result.feedback.clone(),
        elapsed_ms: result.elapsed_ms,
        aborted_at_cell: result.aborted_at_cell,
        node,
        tree_ops: ops,
    }
}

/// One markdown report from a failure reply; `None` if it has no text.
fn merge_report(cells: Vec<Cell>, ids: &mut CellIdGen) -> Option<Cell> {
    let text: Vec<String> = cells
        .into_iter()
        .filter(Cell::is_markdown)
        .map(|c| c.source)
        .filter(|s| !s.trim().is_empty())
        .collect();
    if text.is_empty() {
        return None;
    }
    Some(Cell::markdown(ids.next_id(), text.join("\n\n"), OriginStage::Filter))
}

fn max_cell_number(body: &EventBody) -> u64 {
    let cells: Vec<&Cell> = match body {
        EventBody::UserInput(u) => u.preamble.iter().chain(std::iter::once(&u.cell)).collect(),
        EventBody::Action(a) => a.cells.iter().collect(),
        EventBody::RepairOutcome(r) => r.cells.iter().collect(),
        EventBody::Final(f) => f.summary.iter().collect(),
        _ => Vec::new(),
    };
    cells
        .iter()
        .filter_map(|c| c.id.as_str().strip_prefix("cell-").and_then(|n| n.parse().ok()))
        .max()
        .unwrap_or(0)
}

/// Runs one instruction in a fresh session.
pub async fn run_task(
    instruction: &str,
    config: SessionConfig,
    deps: Deps,
    log: Arc<TranscriptLog>,
) -> Result<(Session, SessionResult), SessionError> {
    let mut session = Session::start(config, deps, log).await?;
    let result = session.run_instruction(instruction).await?;
    Ok((session, result))
}
