//! Tree-structured task trajectory.
//!
//! Step-goal nodes form a chain from the root: advancing descends to a new
//! child step, backtracking replaces the current step with a fresh sibling.
//! Execution turns hang under their step. Replaced subtrees stay in the tree
//! (they count toward search cost) but never reach the model's context.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{render_context, Cell, CellIdGen, OriginStage, Signal, TruncationPolicy};
use crate::fst::AgentState;
use crate::llm::ChatMessage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

pub const ROOT: NodeId = NodeId(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Root,
    StepGoal,
    ExecTurn,
    RepairReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Active,
    Replaced,
    Completed,
    /// A turn whose error was not repaired; its report node stands in for it.
    Failed,
}

impl NodeStatus {
    pub fn is_visible(self) -> bool {
        matches!(self, NodeStatus::Active | NodeStatus::Completed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairMark {
    Cleaned,
    Reported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<Signal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_text: Option<String>,
    pub cells: Vec<Cell>,
    /// Instruction index this node belongs to.
    pub instruction: u32,
    #[serde(default)]
    pub pending_error: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repaired: Option<RepairMark>,
    /// Cells replaced by a successful repair splice, kept for history views.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub superseded: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SpliceOutcome {
    Success { cells: Vec<Cell> },
    Failure { report: Cell },
}

/// Every tree mutation, in a form that can be logged and re-applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TreeOp {
    BeginInstruction { index: u32 },
    Advance { goal: String, cells: Vec<Cell> },
    Replace { goal: String, cells: Vec<Cell> },
    ExecTurn { signal: Signal, cells: Vec<Cell> },
    MarkError { node: NodeId },
    Splice { node: NodeId, outcome: SpliceOutcome },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("a step goal needs a non-empty description")]
    EmptyGoal,
    #[error("nothing to replace: no current step")]
    NothingToReplace,
    #[error("no current step to attach an execution turn to")]
    NoCurrentStep,
    #[error("current node {0:?} is not a step goal or the root")]
    NotAtStep(NodeId),
    #[error("node {0:?} is not a turn awaiting repair")]
    UnknownTurn(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTree {
    nodes: Vec<TrajectoryNode>,
    current: NodeId,
    instruction: u32,
}

impl Default for TrajectoryTree {
    fn default() -> Self {
        Self::new()
    }
}

impl TrajectoryTree {
    pub fn new() -> Self {
        let root = TrajectoryNode {
            id: ROOT,
            kind: NodeKind::Root,
            status: NodeStatus::Active,
            parent: None,
            children: Vec::new(),
            signal: None,
            goal_text: None,
            cells: Vec::new(),
            instruction: 0,
            pending_error: false,
            repaired: None,
            superseded: Vec::new(),
        };
        Self {
            nodes: vec![root],
            current: ROOT,
            instruction: 0,
        }
    }

    /// Rebuilds a tree by re-applying logged operations.
    pub fn from_ops<'a>(ops: impl IntoIterator<Item = &'a TreeOp>) -> Result<Self, TreeError> {
        let mut tree = Self::new();
        for op in ops {
            tree.apply(op)?;
        }
        Ok(tree)
    }

    pub fn apply(&mut self, op: &TreeOp) -> Result<Option<NodeId>, TreeError> {
        match op {
            TreeOp::BeginInstruction { index } => {
                self.begin_instruction(*index);
                Ok(None)
            }
            TreeOp::Advance { goal, cells } => self.advance(goal, cells.clone()).map(Some),
            TreeOp::Replace { goal, cells } => self.backtrack_replace(goal, cells.clone()).map(Some),
            TreeOp::ExecTurn { signal, cells } => self.exec_turn(*signal, cells.clone()).map(Some),
            TreeOp::MarkError { node } => self.mark_error(*node).map(|_| None),
            TreeOp::Splice { node, outcome } => self.splice_repair(*node, outcome.clone()),
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&TrajectoryNode> {
        self.nodes.get(id.0 as usize)
    }

    pub fn nodes(&self) -> &[TrajectoryNode] {
        &self.nodes
    }

    pub fn current(&self) -> NodeId {
        self.current
    }

    pub fn current_node(&self) -> &TrajectoryNode {
        &self.nodes[self.current.0 as usize]
    }

    pub fn current_goal(&self) -> Option<&str> {
        self.current_node().goal_text.as_deref()
    }

    pub fn instruction(&self) -> u32 {
        self.instruction
    }

    fn node_mut(&mut self, id: NodeId) -> &mut TrajectoryNode {
        &mut self.nodes[id.0 as usize]
    }

    fn push_node(&mut self, kind: NodeKind, parent: NodeId, signal: Option<Signal>, goal: Option<String>, cells: Vec<Cell>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        let status = match kind {
            NodeKind::StepGoal => NodeStatus::Active,
            _ => NodeStatus::Completed,
        };
        self.nodes.push(TrajectoryNode {
            id,
            kind,
            status,
            parent: Some(parent),
            children: Vec::new(),
            signal,
            goal_text: goal,
            cells,
            instruction: self.instruction,
            pending_error: false,
            repaired: None,
            superseded: Vec::new(),
        });
        self.node_mut(parent).children.push(id);
        id
    }

    /// Starts a new instruction: later steps hang directly under the root.
    pub fn begin_instruction(&mut self, index: u32) {
        if self.current != ROOT {
            self.close_current_chain();
        }
        self.instruction = index;
        self.current = ROOT;
    }

    fn close_current_chain(&mut self) {
        let mut id = Some(self.current);
        while let Some(n) = id {
            if n == ROOT {
                break;
            }
            let node = self.node_mut(n);
            if node.status == NodeStatus::Active {
                node.status = NodeStatus::Completed;
            }
            id = node.parent;
        }
    }

    /// Opens a new step goal below the current step (or the root).
    pub fn advance(&mut self, goal: &str, cells: Vec<Cell>) -> Result<NodeId, TreeError> {
        let goal = goal.trim();
        if goal.is_empty() {
            return Err(TreeError::EmptyGoal);
        }
        let cur = self.current;
        match self.current_node().kind {
            NodeKind::Root => {}
            NodeKind::StepGoal => self.node_mut(cur).status = NodeStatus::Completed,
            _ => return Err(TreeError::NotAtStep(cur)),
        }
        let id = self.push_node(
            NodeKind::StepGoal,
            cur,
            Some(Signal::AdvanceNextStep),
            Some(goal.to_string()),
            cells,
        );
        self.current = id;
        Ok(id)
    }

    /// Replaces the current step with a new sibling step.
    ///
    /// Observation cells, when present, lead `cells`.
    pub fn backtrack_replace(&mut self, goal: &str, cells: Vec<Cell>) -> Result<NodeId, TreeError> {
        let goal = goal.trim();
        let cur = self.current;
        if self.current_node().kind != NodeKind::StepGoal {
            return Err(TreeError::NothingToReplace);
        }
        if goal.is_empty() {
            return Err(TreeError::EmptyGoal);
        }
        self.mark_subtree(cur, NodeStatus::Replaced);
        let parent = self.current_node().parent.expect("step goals have parents");
        let id = self.push_node(
            NodeKind::StepGoal,
            parent,
            Some(Signal::IterateCurrentStep),
            Some(goal.to_string()),
            cells,
        );
        self.current = id;
        Ok(id)
    }

    fn mark_subtree(&mut self, id: NodeId, status: NodeStatus) {
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = self.node_mut(n);
            node.status = status;
            stack.extend(node.children.iter().copied());
        }
    }

    /// Appends an execution turn under the current step.
    pub fn exec_turn(&mut self, signal: Signal, cells: Vec<Cell>) -> Result<NodeId, TreeError> {
        if self.current_node().kind != NodeKind::StepGoal {
            return Err(TreeError::NoCurrentStep);
        }
        Ok(self.push_node(NodeKind::ExecTurn, self.current, Some(signal), None, cells))
    }

    /// Flags a turn whose execution reported an error.
    pub fn mark_error(&mut self, id: NodeId) -> Result<(), TreeError> {
        match self.node(id).map(|n| n.kind) {
            Some(NodeKind::StepGoal | NodeKind::ExecTurn) => {
                self.node_mut(id).pending_error = true;
                Ok(())
            }
            _ => Err(TreeError::UnknownTurn(id)),
        }
    }

    /// Replaces a faulty turn with the post-filtered outcome.
    ///
    /// Success swaps the turn's cells for the cleaned cells (a step keeps its
    /// goal and observation cells). Failure drops the turn's code and adds a
    /// single markdown report node in its place. Returns the report node id.
    pub fn splice_repair(&mut self, failed: NodeId, outcome: SpliceOutcome) -> Result<Option<NodeId>, TreeError> {
        let Some(node) = self.node(failed) else {
            return Err(TreeError::UnknownTurn(failed));
        };
        if !node.pending_error || !matches!(node.kind, NodeKind::StepGoal | NodeKind::ExecTurn) {
            return Err(TreeError::UnknownTurn(failed));
        }
        let kind = node.kind;
        let kept: Vec<Cell> = if kind == NodeKind::StepGoal {
            leading_markdown(&node.cells)
        } else {
            Vec::new()
        };
        match outcome {
            SpliceOutcome::Success { cells } => {
                let n = self.node_mut(failed);
                n.superseded = std::mem::take(&mut n.cells);
                n.cells = kept.into_iter().chain(cells).collect();
                n.pending_error = false;
                n.repaired = Some(RepairMark::Cleaned);
                Ok(None)
            }
            SpliceOutcome::Failure { report } => {
                let parent = self.node(failed).and_then(|n| n.parent).expect("turns have parents");
                let instruction = self.node(failed).map(|n| n.instruction).unwrap_or(self.instruction);
                let report_id = NodeId(self.nodes.len() as u32);
                self.nodes.push(TrajectoryNode {
                    id: report_id,
                    kind: NodeKind::RepairReport,
                    status: NodeStatus::Completed,
                    parent: None,
                    children: Vec::new(),
                    signal: Some(Signal::DebugFailure),
                    goal_text: None,
                    cells: vec![report],
                    instruction,
                    pending_error: false,
                    repaired: Some(RepairMark::Reported),
                    superseded: Vec::new(),
                });
                let (attach_to, position) = if kind == NodeKind::StepGoal {
                    // The step stays; its report is its first child.
                    let n = self.node_mut(failed);
                    n.superseded = std::mem::take(&mut n.cells);
                    n.cells = kept;
                    n.pending_error = false;
                    n.repaired = Some(RepairMark::Reported);
                    (failed, 0)
                } else {
                    let n = self.node_mut(failed);
                    n.status = NodeStatus::Failed;
                    n.pending_error = false;
                    n.repaired = Some(RepairMark::Reported);
                    let siblings = &self.nodes[parent.0 as usize].children;
                    let pos = siblings.iter().position(|c| *c == failed).expect("child of parent") + 1;
                    (parent, pos)
                };
                self.node_mut(report_id).parent = Some(attach_to);
                self.node_mut(attach_to).children.insert(position, report_id);
                Ok(Some(report_id))
            }
        }
    }

    /// Number of step-goal and execution nodes, replaced ones included.
    pub fn count_nonroot(&self) -> u32 {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::StepGoal | NodeKind::ExecTurn))
            .count() as u32
    }

    /// Step-goal ids from the root to the current step.
    pub fn active_path(&self) -> Vec<NodeId> {
        let mut path = Vec::new();
        let mut id = Some(self.current);
        while let Some(n) = id {
            if n == ROOT {
                break;
            }
            path.push(n);
            id = self.nodes[n.0 as usize].parent;
        }
        path.reverse();
        path
    }

    /// Visible cells of one instruction's trajectory, in notebook order.
    pub fn visible_cells(&self, instruction: u32) -> Vec<&Cell> {
        let mut out = Vec::new();
        for &child in &self.nodes[0].children {
            let node = &self.nodes[child.0 as usize];
            if node.instruction == instruction {
                self.collect_visible(child, &mut out);
            }
        }
        out
    }

    fn collect_visible<'a>(&'a self, id: NodeId, out: &mut Vec<&'a Cell>) {
        let node = &self.nodes[id.0 as usize];
        if !node.status.is_visible() {
            return;
        }
        out.extend(node.cells.iter());
        for &child in &node.children {
            self.collect_visible(child, out);
        }
    }

    /// All visible cells across instructions.
    pub fn all_visible_cells(&self) -> Vec<&Cell> {
        (0..=self.instruction).flat_map(|i| self.visible_cells(i)).collect()
    }
}

fn leading_markdown(cells: &[Cell]) -> Vec<Cell> {
    cells.iter().take_while(|c| c.is_markdown()).cloned().collect()
}

// ---------------------------------------------------------------------------
// Context history

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub cell: Cell,
    /// Final summary cells once the instruction is fulfilled.
    #[serde(default)]
    pub summary: Vec<Cell>,
}

/// Everything the model sees: preamble, instructions, the trajectory tree and
/// the repair episode in progress.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextHistory {
    preamble: Vec<Cell>,
    pub instructions: Vec<InstructionRecord>,
    pub tree: TrajectoryTree,
    /// Executed debug-stage cells of the open repair episode.
    #[serde(default)]
    pub repair_turns: Vec<Cell>,
}

impl ContextHistory {
    pub fn new(preamble: Vec<Cell>) -> Self {
        Self {
            preamble,
            ..Self::default()
        }
    }

    pub fn preamble(&self) -> &[Cell] {
        &self.preamble
    }

    /// Logs a user instruction and points the tree at a fresh chain.
    pub fn push_instruction(&mut self, text: &str, ids: &mut CellIdGen) -> u32 {
        let index = self.instructions.len() as u32;
        let cell = Cell::markdown(ids.next_id(), format!("[USER INSTRUCTION]: {text}"), OriginStage::User);
        self.instructions.push(InstructionRecord {
            cell,
            summary: Vec::new(),
        });
        self.tree.begin_instruction(index);
        index
    }

    pub fn current_instruction_text(&self) -> &str {
        self.instructions
            .last()
            .map(|r| r.cell.source.trim_start_matches("[USER INSTRUCTION]: "))
            .unwrap_or("")
    }

    /// Cells in context order, excluding the preamble and any open repair.
    pub fn trace_cells(&self) -> Vec<&Cell> {
        let mut out = Vec::new();
        for (i, record) in self.instructions.iter().enumerate() {
            out.push(&record.cell);
            out.extend(self.tree.visible_cells(i as u32));
            out.extend(record.summary.iter());
        }
        out
    }
}

/// Builds the message sequence for one model call.
///
/// Layout: system preamble, then the notebook so far (instructions
/// interleaved with their visible trajectories and summaries, plus the open
/// repair episode while debugging or filtering), then the stage prompt.
pub fn assemble_context(
    history: &ContextHistory,
    stage: AgentState,
    stage_prompt: &str,
    policy: &TruncationPolicy,
) -> Vec<ChatMessage> {
    let mut messages = Vec::new();
    if !history.preamble.is_empty() {
        messages.push(ChatMessage::system(render_context(history.preamble.iter(), policy)));
    }
    let mut cells = history.trace_cells();
    if matches!(stage, AgentState::Debug | AgentState::Filter) {
        cells.extend(history.repair_turns.iter());
    }
    if !cells.is_empty() {
        messages.push(ChatMessage::user(render_context(cells, policy)));
    }
    messages.push(ChatMessage::user(stage_prompt.to_string()));
    messages
}
