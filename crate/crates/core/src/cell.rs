//! Cells, actions and action signals.
//!
//! Everything the agent, the user and the execution environment exchange is a
//! sequence of markdown or code cells. An LLM turn is parsed into an
//! [`Action`]: one leading action signal followed by an ordered list of cells.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fst::{self, AgentState};

/// Default language tag carried by code cells.
pub const DEFAULT_LANGUAGE_TAG: &str = "python";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub String);

impl CellId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Sequential id source. Ids are unique within one session.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CellIdGen {
    next: u64,
}

impl CellIdGen {
    pub fn new() -> Self {
        Self::default()
    }

    /// A generator whose next id follows `last`.
    pub fn starting_at(last: u64) -> Self {
        Self { next: last }
    }

    pub fn next_id(&mut self) -> CellId {
        self.next += 1;
        CellId(format!("cell-{:04}", self.next))
    }

    pub fn peek(&self) -> u64 {
        self.next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Markdown,
    Code,
}

/// Which stage produced a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginStage {
    Init,
    Plan,
    Exec,
    Debug,
    Filter,
    User,
}

impl OriginStage {
    pub fn for_state(state: AgentState) -> Self {
        match state {
            AgentState::Idle => OriginStage::User,
            AgentState::Plan => OriginStage::Plan,
            AgentState::Exec => OriginStage::Exec,
            AgentState::Debug => OriginStage::Debug,
            AgentState::Filter => OriginStage::Filter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputChannel {
    Stdout,
    Stderr,
    Rich,
    Error,
}

/// One captured execution output attached to a code cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutput {
    pub channel: OutputChannel,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mime: Option<String>,
    /// Path relative to the session workdir for binary media.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traceback: Option<Vec<String>>,
    #[serde(default)]
    pub truncated: bool,
}

impl CellOutput {
    fn plain(channel: OutputChannel, text: impl Into<String>) -> Self {
        Self {
            channel,
            text: text.into(),
            mime: None,
            payload_path: None,
            error_name: None,
            error_value: None,
            traceback: None,
            truncated: false,
        }
    }

    pub fn stdout(text: impl Into<String>) -> Self {
        Self::plain(OutputChannel::Stdout, text)
    }

    pub fn stderr(text: impl Into<String>) -> Self {
        Self::plain(OutputChannel::Stderr, text)
    }

    pub fn rich(mime: impl Into<String>, text: impl Into<String>, payload_path: Option<String>) -> Self {
        Self {
            mime: Some(mime.into()),
            payload_path,
            ..Self::plain(OutputChannel::Rich, text)
        }
    }

    pub fn error(name: impl Into<String>, value: impl Into<String>, traceback: Vec<String>) -> Self {
        let name = name.into();
        let value = value.into();
        let text = if traceback.is_empty() {
            format!("{name}: {value}")
        } else {
            traceback.join("\n")
        };
        Self {
            error_name: Some(name),
            error_value: Some(value),
            traceback: Some(traceback),
            ..Self::plain(OutputChannel::Error, text)
        }
    }

    pub fn is_error(&self) -> bool {
        self.channel == OutputChannel::Error
    }

    /// Checks that only the fields belonging to the declared channel are set.
    pub fn is_well_formed(&self) -> bool {
        let error_fields = [
            self.error_name.is_some(),
            self.error_value.is_some(),
            self.traceback.is_some(),
        ];
        let channel_ok = match self.channel {
            OutputChannel::Error => error_fields.iter().all(|f| *f) && self.mime.is_none(),
            OutputChannel::Rich => error_fields.iter().all(|f| !*f) && self.mime.is_some(),
            OutputChannel::Stdout | OutputChannel::Stderr => {
                error_fields.iter().all(|f| !*f) && self.mime.is_none() && self.payload_path.is_none()
            }
        };
        channel_ok && (!self.truncated || self.text.contains(ELISION_OPEN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: CellId,
    pub kind: CellKind,
    pub language_tag: String,
    pub source: String,
    #[serde(default)]
    pub outputs: Vec<CellOutput>,
    pub origin_stage: OriginStage,
}

impl Cell {
    pub fn markdown(id: CellId, source: impl Into<String>, origin: OriginStage) -> Self {
        Self {
            id,
            kind: CellKind::Markdown,
            language_tag: "markdown".to_string(),
            source: source.into(),
            outputs: Vec::new(),
            origin_stage: origin,
        }
    }

    pub fn code(
        id: CellId,
        language_tag: impl Into<String>,
        source: impl Into<String>,
        origin: OriginStage,
    ) -> Self {
        Self {
            id,
            kind: CellKind::Code,
            language_tag: language_tag.into(),
            source: source.into(),
            outputs: Vec::new(),
            origin_stage: origin,
        }
    }

    pub fn is_code(&self) -> bool {
        self.kind == CellKind::Code
    }

    pub fn is_markdown(&self) -> bool {
        self.kind == CellKind::Markdown
    }
}

// ---------------------------------------------------------------------------
// Signals

/// Canonical action signals. The canonical spelling is the underscored form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    AdvanceNextStep,
    IterateCurrentStep,
    FulfilInstruction,
    Await,
    EndStep,
    EndDebug,
    DebugFailure,
    DebugSuccess,
}

impl Signal {
    pub const ALL: [Signal; 8] = [
        Signal::AdvanceNextStep,
        Signal::IterateCurrentStep,
        Signal::FulfilInstruction,
        Signal::Await,
        Signal::EndStep,
        Signal::EndDebug,
        Signal::DebugFailure,
        Signal::DebugSuccess,
    ];

    pub fn canonical_token(self) -> &'static str {
        match self {
            Signal::AdvanceNextStep => "<Advance_to_Next_Step>",
            Signal::IterateCurrentStep => "<Iterate_on_the_Current_Step>",
            Signal::FulfilInstruction => "<Fulfil_Instruction>",
            Signal::Await => "<Await>",
            Signal::EndStep => "<End_Step>",
            Signal::EndDebug => "<End_Debug>",
            Signal::DebugFailure => "<Debug_Failure>",
            Signal::DebugSuccess => "<Debug_Success>",
        }
    }

    /// Spelling used inside the stage prompts.
    pub fn prompt_token(self) -> &'static str {
        match self {
            Signal::AdvanceNextStep => "<Advance to Next STEP>",
            Signal::IterateCurrentStep => "<Iterate on Current STEP>",
            Signal::FulfilInstruction => "<Fulfill USER INSTRUCTION>",
            Signal::Await => "<await>",
            Signal::EndStep => "<end_step>",
            Signal::EndDebug => "<end_debug>",
            Signal::DebugFailure => "<debug_failure>",
            Signal::DebugSuccess => "<debug_success>",
        }
    }

    /// Signals after which the action must carry at least one cell.
    pub fn requires_cells(self) -> bool {
        matches!(
            self,
            Signal::Await | Signal::AdvanceNextStep | Signal::IterateCurrentStep
        )
    }

    /// Signals whose actions may not contain code cells.
    pub fn forbids_code(self) -> bool {
        matches!(self, Signal::FulfilInstruction | Signal::DebugFailure)
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSignal {
    pub canonical: Signal,
    /// Literal token as it appeared in the reply (empty for implicit signals).
    pub raw: String,
}

impl ActionSignal {
    pub fn implicit(canonical: Signal) -> Self {
        Self {
            canonical,
            raw: String::new(),
        }
    }
}

/// Maps every accepted spelling of a signal token to its canonical signal.
///
/// Lookups are case-insensitive on the token interior and treat runs of
/// spaces, underscores and hyphens as one separator.
#[derive(Debug, Clone)]
pub struct SignalAliasTable {
    map: HashMap<String, Signal>,
}

impl Default for SignalAliasTable {
    fn default() -> Self {
        let mut table = Self {
            map: HashMap::new(),
        };
        for signal in Signal::ALL {
            table.insert(signal.canonical_token(), signal);
            table.insert(signal.prompt_token(), signal);
        }
        table
    }
}

impl SignalAliasTable {
    pub fn insert(&mut self, token: &str, signal: Signal) {
        self.map.insert(normalize_token(token), signal);
    }

    pub fn lookup(&self, token: &str) -> Option<Signal> {
        self.map.get(&normalize_token(token)).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn normalize_token(token: &str) -> String {
    let inner = token.trim().trim_start_matches('<').trim_end_matches('>');
    let mut out = String::with_capacity(inner.len());
    let mut pending_sep = false;
    for ch in inner.chars() {
        if ch.is_whitespace() || ch == '_' || ch == '-' {
            pending_sep = !out.is_empty();
        } else {
            if pending_sep {
                out.push('_');
                pending_sep = false;
            }
            out.extend(ch.to_lowercase());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Actions and parsing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub signal: ActionSignal,
    pub cells: Vec<Cell>,
    pub stage: AgentState,
}

impl Action {
    pub fn code_cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.is_code())
    }

    pub fn has_code(&self) -> bool {
        self.cells.iter().any(Cell::is_code)
    }

    /// Replaces provisional parser ids with session-unique ids.
    pub fn assign_ids(&mut self, ids: &mut CellIdGen) {
        for cell in &mut self.cells {
            cell.id = ids.next_id();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("reply does not start with an action signal (got {preview:?})")]
    NoSignal { preview: String },
    #[error("signal {signal} is not admissible in stage {stage}")]
    InadmissibleSignal { signal: Signal, stage: AgentState },
    #[error("signal {signal} must be followed by at least one cell")]
    EmptyAction { signal: Signal },
    #[error("signal {signal} may not carry code cells")]
    CodeNotAllowed { signal: Signal },
    #[error("signal {signal} must carry at least one code cell")]
    MissingCode { signal: Signal },
    #[error("missing `[STEP GOAL]:` markdown cell")]
    MissingStepGoal,
    #[error("stage {0} has no action signals")]
    NoSignalsForStage(AgentState),
}

/// Knobs that change how replies are split into cells.
#[derive(Debug, Clone)]
pub struct ParseOptions {
    /// Fence info string that marks code cells.
    pub code_tag: String,
    /// Signal assumed when the reply starts without one (initial turn).
    pub implicit_signal: Option<Signal>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            code_tag: DEFAULT_LANGUAGE_TAG.to_string(),
            implicit_signal: None,
        }
    }
}

/// Parses a raw reply produced in `stage`, using the stage's standard signal set.
pub fn parse_action(raw: &str, stage: AgentState, aliases: &SignalAliasTable) -> Result<Action, ParseError> {
    let admissible = fst::admissible_signals(stage).map_err(|_| ParseError::NoSignalsForStage(stage))?;
    parse_action_with(raw, stage, admissible, aliases, &ParseOptions::default())
}

/// Parses a reply against an explicit admissible set.
pub fn parse_action_with(
    raw: &str,
    stage: AgentState,
    admissible: &[Signal],
    aliases: &SignalAliasTable,
    options: &ParseOptions,
) -> Result<Action, ParseError> {
    let (signal, rest) = match split_signal(raw, aliases) {
        Some((signal, token, rest)) => (
            ActionSignal {
                canonical: signal,
                raw: token.to_string(),
            },
            rest,
        ),
        None => match options.implicit_signal {
            Some(signal) => (ActionSignal::implicit(signal), raw),
            None => {
                return Err(ParseError::NoSignal {
                    preview: raw.trim_start().chars().take(40).collect(),
                })
            }
        },
    };
    if !admissible.contains(&signal.canonical) {
        return Err(ParseError::InadmissibleSignal {
            signal: signal.canonical,
            stage,
        });
    }

    let origin = OriginStage::for_state(stage);
    let cells: Vec<Cell> = split_cells(rest, &options.code_tag)
        .into_iter()
        .enumerate()
        .map(|(i, (kind, source))| {
            let id = CellId(format!("draft-{i}"));
            match kind {
                CellKind::Markdown => Cell::markdown(id, source, origin),
                CellKind::Code => Cell::code(id, options.code_tag.clone(), source, origin),
            }
        })
        .collect();

    if cells.is_empty() && signal.canonical.requires_cells() {
        return Err(ParseError::EmptyAction {
            signal: signal.canonical,
        });
    }
    if signal.canonical.forbids_code() && cells.iter().any(Cell::is_code) {
        return Err(ParseError::CodeNotAllowed {
            signal: signal.canonical,
        });
    }
    Ok(Action {
        signal,
        cells,
        stage,
    })
}

const DECORATION: &[char] = &['*', '`', '_'];

fn split_signal<'a>(raw: &'a str, aliases: &SignalAliasTable) -> Option<(Signal, &'a str, &'a str)> {
    let text = raw.trim_start();
    let undecorated = text.trim_start_matches(DECORATION);
    // A fence is not decoration.
    if !undecorated.starts_with('<') || text.starts_with("```") {
        return None;
    }
    let close = undecorated.find('>')?;
    let token = &undecorated[..=close];
    if token.contains('\n') {
        return None;
    }
    let signal = aliases.lookup(token)?;
    let mut rest = &undecorated[close + 1..];
    let trailing = rest.len() - rest.trim_start_matches(DECORATION).len();
    if trailing > 0 && !rest.starts_with("```") {
        rest = &rest[trailing..];
    }
    Some((signal, token, rest))
}

struct Fence {
    len: usize,
}

fn opening_fence(line: &str) -> Option<(Fence, String)> {
    let trimmed = line.trim_start();
    let len = trimmed.chars().take_while(|c| *c == '`').count();
    if len < 3 {
        return None;
    }
    let info = trimmed[len..].trim();
    if info.contains('`') {
        return None;
    }
    let tag = info.split_whitespace().next().unwrap_or("").to_ascii_lowercase();
    Some((Fence { len }, tag))
}

fn closes(line: &str, fence: &Fence) -> bool {
    let trimmed = line.trim();
    let len = trimmed.chars().take_while(|c| *c == '`').count();
    len >= fence.len && len == trimmed.len()
}

/// Splits reply text into (kind, source) pairs.
///
/// Fenced blocks tagged `markdown` or the code tag become cells; other fence
/// tags become markdown. Prose between fences becomes a markdown cell.
pub fn split_cells(text: &str, code_tag: &str) -> Vec<(CellKind, String)> {
    let code_tag = code_tag.to_ascii_lowercase();
    let mut cells = Vec::new();
    let mut prose = String::new();
    let mut lines = text.split_inclusive('\n');

    let flush_prose = |prose: &mut String, cells: &mut Vec<(CellKind, String)>| {
        let trimmed = prose.trim();
        if !trimmed.is_empty() {
            cells.push((CellKind::Markdown, trimmed.to_string()));
        }
        prose.clear();
    };

    while let Some(line) = lines.next() {
        let Some((fence, tag)) = opening_fence(line) else {
            prose.push_str(line);
            continue;
        };
        flush_prose(&mut prose, &mut cells);
        let mut body = String::new();
        for inner in lines.by_ref() {
            if closes(inner, &fence) {
                break;
            }
            body.push_str(inner);
        }
        if body.ends_with('\n') {
            body.pop();
            if body.ends_with('\r') {
                body.pop();
            }
        }
        let kind = if tag == code_tag { CellKind::Code } else { CellKind::Markdown };
        cells.push((kind, body));
    }
    flush_prose(&mut prose, &mut cells);
    cells
}

/// Finds the `[STEP GOAL]:` label among markdown cells.
///
/// Returns the index of the labeled cell and the goal description.
pub fn find_step_goal(cells: &[Cell]) -> Result<(usize, String), ParseError> {
    const LABEL: &str = "[STEP GOAL]:";
    for (i, cell) in cells.iter().enumerate() {
        if !cell.is_markdown() {
            continue;
        }
        if let Some(pos) = cell.source.find(LABEL) {
            let goal = cell.source[pos + LABEL.len()..].trim();
            if goal.is_empty() {
                return Err(ParseError::MissingStepGoal);
            }
            return Ok((i, goal.to_string()));
        }
    }
    Err(ParseError::MissingStepGoal)
}

// ---------------------------------------------------------------------------
// Rendering

const ELISION_OPEN: &str = "...[";

/// Head/tail character budget applied to each output when rendering context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub head_chars: usize,
    pub tail_chars: usize,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            head_chars: 2000,
            tail_chars: 2000,
        }
    }
}

impl TruncationPolicy {
    /// Returns the possibly shortened text and whether anything was elided.
    pub fn apply(&self, text: &str) -> (String, bool) {
        let total = text.chars().count();
        if total <= self.head_chars + self.tail_chars {
            return (text.to_string(), false);
        }
        let elided = total - self.head_chars - self.tail_chars;
        let head: String = text.chars().take(self.head_chars).collect();
        let tail: String = text.chars().skip(total - self.tail_chars).collect();
        (format!("{head}\n{ELISION_OPEN}{elided} characters truncated]...\n{tail}"), true)
    }
}

fn fence_for(body: &str) -> String {
    let mut longest = 0;
    let mut run = 0;
    for ch in body.chars() {
        if ch == '`' {
            run += 1;
            longest = longest.max(run);
        } else {
            run = 0;
        }
    }
    "`".repeat(longest.max(2) + 1)
}

fn fenced(tag: &str, body: &str) -> String {
    let fence = fence_for(body);
    format!("{fence}{tag}\n{body}\n{fence}")
}

/// Renders one output as a labeled fenced block.
pub fn render_output(output: &CellOutput, policy: &TruncationPolicy) -> String {
    let body = match output.channel {
        OutputChannel::Error => {
            let head = format!(
                "{}: {}",
                output.error_name.as_deref().unwrap_or("Error"),
                output.error_value.as_deref().unwrap_or("")
            );
            match &output.traceback {
                Some(tb) if !tb.is_empty() => tb.join("\n"),
                _ => head,
            }
        }
        OutputChannel::Rich => match (&output.payload_path, output.mime.as_deref()) {
            (Some(path), Some(mime)) => format!("[{mime} saved to {path}]"),
            _ => output.text.clone(),
        },
        OutputChannel::Stdout | OutputChannel::Stderr => output.text.clone(),
    };
    let (body, _) = policy.apply(&body);
    let label = match output.channel {
        OutputChannel::Stdout => "stdout",
        OutputChannel::Stderr => "stderr",
        OutputChannel::Rich => "output",
        OutputChannel::Error => "error",
    };
    fenced(label, &body)
}

/// Renders a single cell (and, for code cells, its outputs).
pub fn render_cell(cell: &Cell, policy: &TruncationPolicy) -> String {
    let tag = match cell.kind {
        CellKind::Markdown => "markdown",
        CellKind::Code => cell.language_tag.as_str(),
    };
    let mut out = fenced(tag, &cell.source);
    for output in &cell.outputs {
        out.push('\n');
        out.push_str(&render_output(output, policy));
    }
    out
}

/// Deterministic prompt text for an ordered cell list.
pub fn render_context<'a, I>(cells: I, policy: &TruncationPolicy) -> String
where
    I: IntoIterator<Item = &'a Cell>,
{
    cells
        .into_iter()
        .map(|c| render_cell(c, policy))
        .collect::<Vec<_>>()
        .join("\n")
}
