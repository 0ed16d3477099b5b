//! The stage transducer: states, per-stage signal alphabets, the transition
//! function and the budget guardrails that force transitions.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{CellId, Signal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentState {
    /// Start and end state; waits for user input.
    Idle,
    Plan,
    Exec,
    Debug,
    Filter,
}

impl AgentState {
    pub const ALL: [AgentState; 5] = [
        AgentState::Idle,
        AgentState::Plan,
        AgentState::Exec,
        AgentState::Debug,
        AgentState::Filter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentState::Idle => "idle",
            AgentState::Plan => "plan",
            AgentState::Exec => "exec",
            AgentState::Debug => "debug",
            AgentState::Filter => "filter",
        }
    }
}

impl fmt::Display for AgentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    NoError,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub name: String,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_id: Option<CellId>,
}

/// Environment feedback for one executed action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Feedback {
    NoError,
    Error(ErrorDetail),
}

impl Feedback {
    pub fn error(name: impl Into<String>, value: impl Into<String>, cell_id: Option<CellId>) -> Self {
        Feedback::Error(ErrorDetail {
            name: name.into(),
            value: value.into(),
            cell_id,
        })
    }

    pub fn kind(&self) -> FeedbackKind {
        match self {
            Feedback::NoError => FeedbackKind::NoError,
            Feedback::Error(_) => FeedbackKind::Error,
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self, Feedback::Error(_))
    }

    pub fn detail(&self) -> Option<&ErrorDetail> {
        match self {
            Feedback::Error(d) => Some(d),
            Feedback::NoError => None,
        }
    }
}

/// Transition caps. `max_planning_execution_number = None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub max_planning_number: u32,
    pub max_execution_number: u32,
    pub max_debug_number: u32,
    pub max_planning_execution_number: Option<u32>,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            max_planning_number: 7,
            max_execution_number: 6,
            max_debug_number: 8,
            max_planning_execution_number: Some(15),
        }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<(), FstError> {
        let positive = self.max_planning_number > 0
            && self.max_execution_number > 0
            && self.max_debug_number > 0
            && self.max_planning_execution_number.map_or(true, |n| n > 0);
        if positive {
            Ok(())
        } else {
            Err(FstError::InvalidBudgets)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub planning_entries: u32,
    pub exec_entries_current_step: u32,
    pub debug_attempts_current_episode: u32,
    pub nonroot_nodes: u32,
    pub llm_calls: u32,
    pub repair_episodes: u32,
}

/// Where control returns after post-filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResumeTarget {
    Plan,
    Exec,
    Idle,
}

impl From<ResumeTarget> for AgentState {
    fn from(r: ResumeTarget) -> Self {
        match r {
            ResumeTarget::Plan => AgentState::Plan,
            ResumeTarget::Exec => AgentState::Exec,
            ResumeTarget::Idle => AgentState::Idle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FstError {
    #[error("the idle state consumes user input, not action signals")]
    IdleHasNoSignals,
    #[error("signal {signal} is not admissible in state {state}")]
    InadmissiblePair { state: AgentState, signal: Signal },
    #[error("a resume target is required when leaving the filter state")]
    MissingResume,
    #[error("repair can only start from plan or exec, not {0}")]
    InvalidOrigin(AgentState),
    #[error("all budgets must be positive")]
    InvalidBudgets,
}

const PLAN_SIGNALS: [Signal; 3] = [
    Signal::AdvanceNextStep,
    Signal::IterateCurrentStep,
    Signal::FulfilInstruction,
];
const EXEC_SIGNALS: [Signal; 2] = [Signal::Await, Signal::EndStep];
const DEBUG_SIGNALS: [Signal; 2] = [Signal::Await, Signal::EndDebug];
const FILTER_SIGNALS: [Signal; 2] = [Signal::DebugFailure, Signal::DebugSuccess];

pub fn admissible_signals(q: AgentState) -> Result<&'static [Signal], FstError> {
    match q {
        AgentState::Idle => Err(FstError::IdleHasNoSignals),
        AgentState::Plan => Ok(&PLAN_SIGNALS),
        AgentState::Exec => Ok(&EXEC_SIGNALS),
        AgentState::Debug => Ok(&DEBUG_SIGNALS),
        AgentState::Filter => Ok(&FILTER_SIGNALS),
    }
}

/// The transition function.
///
/// Errors raised by plan or exec actions route to `Debug`. Errors inside
/// `Debug` stay in `Debug`. Cleaned code that fails its validation run after
/// `DebugSuccess` opens a new debugging episode; every other filter outcome
/// returns to `resume`.
pub fn next_state(
    q: AgentState,
    sigma: Signal,
    f: FeedbackKind,
    resume: Option<ResumeTarget>,
) -> Result<AgentState, FstError> {
    let admissible = admissible_signals(q)?;
    if !admissible.contains(&sigma) {
        return Err(FstError::InadmissiblePair { state: q, signal: sigma });
    }
    use AgentState::*;
    if matches!(q, Plan | Exec) && f == FeedbackKind::Error {
        return Ok(Debug);
    }
    Ok(match (q, sigma) {
        (Plan, Signal::AdvanceNextStep | Signal::IterateCurrentStep) => Exec,
        (Plan, Signal::FulfilInstruction) => Idle,
        (Exec, Signal::Await) => Exec,
        (Exec, Signal::EndStep) => Plan,
        (Debug, Signal::Await) => Debug,
        (Debug, Signal::EndDebug) => Filter,
        (Filter, Signal::DebugSuccess) if f == FeedbackKind::Error => Debug,
        (Filter, _) => resume.ok_or(FstError::MissingResume)?.into(),
        _ => unreachable!("admissibility checked above"),
    })
}

/// The state that would have followed the faulty action had it succeeded.
pub fn compute_resume(pre_error_state: AgentState, pre_error_signal: Signal) -> Result<ResumeTarget, FstError> {
    if !matches!(pre_error_state, AgentState::Plan | AgentState::Exec) {
        return Err(FstError::InvalidOrigin(pre_error_state));
    }
    match next_state(pre_error_state, pre_error_signal, FeedbackKind::NoError, None)? {
        AgentState::Plan => Ok(ResumeTarget::Plan),
        AgentState::Exec => Ok(ResumeTarget::Exec),
        AgentState::Idle => Ok(ResumeTarget::Idle),
        other => unreachable!("plan/exec never map to {other} without error"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetRule {
    /// `max_debug_number` reached: leave debugging for post-filtering.
    DebugLimit,
    /// `max_execution_number` reached for the current step.
    ExecutionLimit,
    /// `max_planning_number` reached.
    PlanningLimit,
    /// `max_planning_execution_number` non-root nodes reached.
    NodeLimit,
}

/// A transition taken by the engine rather than chosen by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcedMove {
    pub rule: BudgetRule,
    /// The state the unforced transition would have entered.
    pub intended: AgentState,
    pub forced_to: AgentState,
    /// Synthetic signal recorded for the move, if the rule defines one.
    pub synthetic_signal: Option<Signal>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetDecision {
    pub state: AgentState,
    /// Rules that fired, in order. A forced plan entry can itself trip the
    /// planning or node limit, so more than one rule may fire.
    pub forced: Vec<ForcedMove>,
}

impl BudgetDecision {
    pub fn was_forced(&self) -> bool {
        !self.forced.is_empty()
    }
}

/// Applies the guardrails to a proposed next state.
///
/// `counters` describe the entries already made; a rule fires when entering
/// `q_next` would exceed its cap.
pub fn apply_budgets(q_next: AgentState, counters: &Counters, budgets: &Budgets) -> BudgetDecision {
    let mut state = q_next;
    let mut forced = Vec::new();
    let mut push = |rule, intended, to, sig| {
        forced.push(ForcedMove {
            rule,
            intended,
            forced_to: to,
            synthetic_signal: sig,
        })
    };

    if state == AgentState::Debug && counters.debug_attempts_current_episode >= budgets.max_debug_number {
        push(BudgetRule::DebugLimit, state, AgentState::Filter, Some(Signal::EndDebug));
        state = AgentState::Filter;
    }
    if state == AgentState::Exec && counters.exec_entries_current_step >= budgets.max_execution_number {
        push(BudgetRule::ExecutionLimit, state, AgentState::Plan, Some(Signal::EndStep));
        state = AgentState::Plan;
    }
    if state == AgentState::Plan && counters.planning_entries >= budgets.max_planning_number {
        push(BudgetRule::PlanningLimit, state, AgentState::Idle, None);
        state = AgentState::Idle;
    }
    if matches!(state, AgentState::Plan | AgentState::Exec) {
        if let Some(cap) = budgets.max_planning_execution_number {
            if counters.nonroot_nodes >= cap {
                push(BudgetRule::NodeLimit, state, AgentState::Idle, None);
                state = AgentState::Idle;
            }
        }
    }
    BudgetDecision { state, forced }
}

/// One row of the exported transition table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub state: AgentState,
    pub signal: Signal,
    pub feedback: FeedbackKind,
    /// Target state name, or `"resume"` for the post-filter return.
    pub next: String,
}

/// Every (state, admissible signal, feedback) triple and its target.
pub fn transition_table() -> Vec<TransitionRow> {
    let mut rows = Vec::new();
    for q in AgentState::ALL {
        let Ok(signals) = admissible_signals(q) else { continue };
        for &sigma in signals {
            for f in [FeedbackKind::NoError, FeedbackKind::Error] {
                // Probe with two different resume targets: if the result
                // follows the target, the row is the resume rule.
                let a = next_state(q, sigma, f, Some(ResumeTarget::Plan)).expect("admissible");
                let b = next_state(q, sigma, f, Some(ResumeTarget::Idle)).expect("admissible");
                let next = if a != b { "resume".to_string() } else { a.as_str().to_string() };
                rows.push(TransitionRow {
                    state: q,
                    signal: sigma,
                    feedback: f,
                    next,
                });
            }
        }
    }
    rows
}

/// Upper bound on model turns for one instruction under finite budgets.
///
/// Each planning entry opens at most one step; each step has at most
/// `max_execution_number` exec entries; each plan/exec turn can open one
/// repair episode of at most `max_debug_number` debug turns plus one filter
/// turn, and each failed validation may open `max_revalidations` more.
pub fn turn_bound(budgets: &Budgets, max_revalidations: u32, retries_per_turn: u32) -> u64 {
    let plan = u64::from(budgets.max_planning_number);
    let exec = u64::from(budgets.max_execution_number);
    let debug = u64::from(budgets.max_debug_number);
    let node_turns = plan * (1 + exec);
    let episode = (debug + 1) * (1 + u64::from(max_revalidations));
    node_turns * (1 + episode) * (1 + u64::from(retries_per_turn))
}
