//! Tools offered to the agent as importable code plus markdown contracts,
//! and the budgeted visual evaluation tool.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cell::{Cell, CellIdGen, OriginStage, DEFAULT_LANGUAGE_TAG};
use crate::executor::{ExecError, Kernel, ToolCallError, ToolHost};
use crate::llm::{ChatMessage, ContentPart, ImageUrl, LlmProvider, LlmRequest};
use crate::transcript::{CallPurpose, CallRecorder};

pub const VISUAL_TOOL_NAME: &str = "evaluate_image";
pub const DEFAULT_JUDGE_MODEL: &str = "gpt-4o-mini";
pub const DEFAULT_GLOBAL_CNT: u32 = 4;
pub const USAGE_LIMIT_MESSAGE: &str = "Usage limit reached. Please manually evaluate.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    /// Markdown shown to the agent.
    pub description: String,
    /// Code executed once at session start, typically imports and defs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setup_code: Option<String>,
    pub contract: String,
}

#[derive(Debug, Error)]
pub enum ToolkitError {
    #[error("tool registry {path}: {message}")]
    Registry { path: PathBuf, message: String },
    #[error("duplicate tool name {0}")]
    Duplicate(String),
    #[error("tool setup could not run: {0}")]
    Executor(#[from] ExecError),
}

/// Reads a JSON list of descriptors.
pub fn load_registry(path: &Path) -> Result<Vec<ToolDescriptor>, ToolkitError> {
    let err = |message: String| ToolkitError::Registry {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let tools: Vec<ToolDescriptor> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for t in &tools {
        if !seen.insert(t.name.as_str()) {
            return Err(ToolkitError::Duplicate(t.name.clone()));
        }
    }
    Ok(tools)
}

/// Descriptor for the visual evaluation tool with the given call budget.
pub fn visual_tool_descriptor(global_cnt: u32) -> ToolDescriptor {
    ToolDescriptor {
        name: VISUAL_TOOL_NAME.into(),
        description: "Judges a saved chart or image against stated requirements using a vision model. \
             Save the figure to a file first, then pass its path."
            .into(),
        setup_code: Some(format!(
            "def {VISUAL_TOOL_NAME}(image_path, requirements, query):\n    \
             return __cellwise_tool_call__('{VISUAL_TOOL_NAME}', image_path, requirements, query)"
        )),
        contract: format!(
            "`{VISUAL_TOOL_NAME}(image_path: str, requirements: str, query: str) -> str`\n\
             Returns the judge's textual assessment. It may be used at most {} times per task; \
             after that it returns \"{USAGE_LIMIT_MESSAGE}\".",
            number_word(global_cnt)
        ),
    }
}

fn number_word(n: u32) -> String {
    const WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];
    WORDS.get(n as usize).map(|w| w.to_string()).unwrap_or_else(|| n.to_string())
}

/// Facts about the execution environment shown to the agent up front.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvInfo {
    pub language: String,
    pub backend: String,
    /// Files available in the working directory, relative paths.
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl EnvInfo {
    /// Lists regular files under `workdir`, skipping the outputs directory.
    pub fn scan(language: &str, backend: &str, workdir: &Path) -> Self {
        let mut files = Vec::new();
        let mut stack = vec![workdir.to_path_buf()];
        while let Some(dir) = stack.pop() {
            let Ok(entries) = std::fs::read_dir(&dir) else { continue };
            for entry in entries.flatten() {
                let path = entry.path();
                let rel = path.strip_prefix(workdir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                if rel == "outputs" || rel.starts_with('.') {
                    continue;
                }
                if path.is_dir() {
                    stack.push(path);
                } else {
                    files.push(rel);
                }
            }
        }
        files.sort();
        Self {
            language: language.into(),
            backend: backend.into(),
            files,
            notes: None,
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "[ENVIRONMENT]: {} code cells run in a persistent {} session. Variables persist between cells; \
             figures are saved under `outputs/`.",
            self.language, self.backend
        );
        if self.files.is_empty() {
            s.push_str("\nThe working directory is empty.");
        } else {
            s.push_str("\nFiles in the working directory:");
            for f in &self.files {
                s.push_str(&format!("\n- `{f}`"));
            }
        }
        if let Some(notes) = &self.notes {
            s.push('\n');
            s.push_str(notes);
        }
        s
    }
}

/// Ordered preamble cells before execution: environment note, then per tool
/// its description and setup cell.
pub fn inject_tools(descriptors: &[ToolDescriptor], env: &EnvInfo, ids: &mut CellIdGen) -> Vec<Cell> {
    let mut cells = vec![Cell::markdown(ids.next_id(), env.to_markdown(), OriginStage::Init)];
    for t in descriptors {
        cells.push(Cell::markdown(ids.next_id(), describe(t), OriginStage::Init));
        if let Some(code) = &t.setup_code {
            cells.push(Cell::code(ids.next_id(), DEFAULT_LANGUAGE_TAG, code.clone(), OriginStage::Init));
        }
    }
    cells
}

fn describe(t: &ToolDescriptor) -> String {
    format!("[TOOL]: `{}`\n{}\n\nUsage:\n{}", t.name, t.description, t.contract)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolWarning {
    pub tool: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preamble {
    pub cells: Vec<Cell>,
    /// Tools whose setup succeeded.
    pub enabled: Vec<String>,
    pub warnings: Vec<ToolWarning>,
}

/// Builds the preamble and runs each setup cell once. A tool whose setup
/// fails is dropped from the preamble and replaced by a warning cell.
pub async fn initialize_tools(
    descriptors: &[ToolDescriptor],
    env: &EnvInfo,
    kernel: &dyn Kernel,
    host: Option<Arc<dyn ToolHost>>,
    timeout: Duration,
    ids: &mut CellIdGen,
) -> Result<Preamble, ToolkitError> {
    let mut cells = vec![Cell::markdown(ids.next_id(), env.to_markdown(), OriginStage::Init)];
    let mut enabled = Vec::new();
    let mut warnings = Vec::new();
    for t in descriptors {
        let desc = Cell::markdown(ids.next_id(), describe(t), OriginStage::Init);
        let Some(code) = &t.setup_code else {
            cells.push(desc);
            enabled.push(t.name.clone());
            continue;
        };
        let mut setup = vec![Cell::code(ids.next_id(), DEFAULT_LANGUAGE_TAG, code.clone(), OriginStage::Init)];
        let result = kernel.execute_cells(&setup, timeout, host.clone()).await?;
        match result.feedback.detail() {
            None => {
                result.attach_to(&mut setup);
                cells.push(desc);
                cells.extend(setup);
                enabled.push(t.name.clone());
            }
            Some(d) => {
                let error = format!("{}: {}", d.name, d.value);
                tracing::warn!(tool = %t.name, %error, "tool setup failed; tool disabled");
                cells.push(Cell::markdown(
                    ids.next_id(),
                    format!("[WARNING]: tool `{}` is unavailable because its setup failed ({error}).", t.name),
                    OriginStage::Init,
                ));
                warnings.push(ToolWarning { tool: t.name.clone(), error });
            }
        }
    }
    Ok(Preamble { cells, enabled, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualToolState {
    pub evaluation_cnt: u32,
    pub global_cnt: u32,
}

impl Default for VisualToolState {
    fn default() -> Self {
        Self::new(DEFAULT_GLOBAL_CNT)
    }
}

impl VisualToolState {
    pub fn new(global_cnt: u32) -> Self {
        Self {
            evaluation_cnt: 0,
            global_cnt,
        }
    }

    pub fn exhausted(&self) -> bool {
        self.evaluation_cnt >= self.global_cnt
    }

    pub fn reset(&mut self) {
        self.evaluation_cnt = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VisualToolError {
    #[error("image not found: {0}")]
    InvalidImagePath(String),
    #[error("argument `{0}` is empty")]
    EmptyArgument(&'static str),
    #[error("judge model call failed: {0}")]
    ModelCallFailed(String),
}

impl From<VisualToolError> for ToolCallError {
    fn from(e: VisualToolError) -> Self {
        let ename = match e {
            VisualToolError::InvalidImagePath(_) => "FileNotFoundError",
            VisualToolError::EmptyArgument(_) => "ValueError",
            VisualToolError::ModelCallFailed(_) => "RuntimeError",
        };
        ToolCallError::new(ename, e.to_string())
    }
}

/// Text part of the judge request.
pub fn visual_prompt(requirements: &str, query: &str) -> String {
    "Expected Requirements:\n".to_string() + requirements + "\nQuery:\n" + query + "\nYour response:\n"
}

fn media_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/png",
    }
}

/// Builds the two-part judge request for an image file.
pub fn visual_request(model: &str, image: &Path, requirements: &str, query: &str) -> Result<LlmRequest, VisualToolError> {
    if requirements.trim().is_empty() {
        return Err(VisualToolError::EmptyArgument("requirements"));
    }
    if query.trim().is_empty() {
        return Err(VisualToolError::EmptyArgument("query"));
    }
    let bytes = std::fs::read(image).map_err(|_| VisualToolError::InvalidImagePath(image.display().to_string()))?;
    let url = format!(
        "data:{};base64,{}",
        media_type(image),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    );
    let message = ChatMessage::user_parts(vec![
        ContentPart::Text {
            text: visual_prompt(requirements, query),
        },
        ContentPart::ImageUrl {
            image_url: ImageUrl { url },
        },
    ]);
    Ok(LlmRequest::new(model, 0.0, vec![message]))
}

/// Asks the judge model about an image. Past the budget the limit message
/// is returned without a call; only successful calls consume budget.
pub async fn evaluate_image(
    image: &Path,
    requirements: &str,
    query: &str,
    state: &mut VisualToolState,
    llm: &dyn LlmProvider,
    model: &str,
    recorder: Option<&CallRecorder>,
) -> Result<String, VisualToolError> {
    if state.exhausted() {
        return Ok(USAGE_LIMIT_MESSAGE.to_string());
    }
    if image.as_os_str().is_empty() || !image.is_file() {
        return Err(VisualToolError::InvalidImagePath(image.display().to_string()));
    }
    let request = visual_request(model, image, requirements, query)?;
    let reply = llm
        .complete(&request)
        .await
        .map_err(|e| VisualToolError::ModelCallFailed(e.to_string()))?;
    if let Some(r) = recorder {
        r.record(CallPurpose::Tool, None, 0, &request, &reply, None);
    }
    state.evaluation_cnt += 1;
    Ok(reply.text)
}

/// Serves tool calls from executed code for one session.
pub struct SessionTools {
    workdir: PathBuf,
    llm: Arc<dyn LlmProvider>,
    judge_model: String,
    recorder: Option<Arc<CallRecorder>>,
    visual: Mutex<VisualToolState>,
    enabled: Mutex<Vec<String>>,
}

impl std::fmt::Debug for SessionTools {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionTools")
            .field("judge_model", &self.judge_model)
            .field("visual", &self.visual_state())
            .finish()
    }
}

impl SessionTools {
    pub fn new(
        workdir: impl Into<PathBuf>,
        llm: Arc<dyn LlmProvider>,
        judge_model: impl Into<String>,
        global_cnt: u32,
        recorder: Option<Arc<CallRecorder>>,
    ) -> Self {
        Self {
            workdir: workdir.into(),
            llm,
            judge_model: judge_model.into(),
            recorder,
            visual: Mutex::new(VisualToolState::new(global_cnt)),
            enabled: Mutex::new(vec![VISUAL_TOOL_NAME.to_string()]),
        }
    }

    pub fn visual_state(&self) -> VisualToolState {
        *self.visual.lock().expect("poisoned")
    }

    /// Per-task budget reset.
    pub fn reset(&self) {
        self.visual.lock().expect("poisoned").reset();
    }

    pub fn set_enabled(&self, names: Vec<String>) {
        *self.enabled.lock().expect("poisoned") = names;
    }

    fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

fn str_arg<'a>(args: &'a Value, i: usize) -> &'a str {
    args.get(i).and_then(Value::as_str).unwrap_or("")
}

#[async_trait]
impl ToolHost for SessionTools {
    fn tool_names(&self) -> Vec<String> {
        self.enabled.lock().expect("poisoned").clone()
    }

    async fn call(&self, name: &str, args: Value) -> Result<Value, ToolCallError> {
        if name != VISUAL_TOOL_NAME || !self.tool_names().iter().any(|t| t == name) {
            return Err(ToolCallError::new("NameError", format!("tool {name} is not available")));
        }
        let image = self.resolve(str_arg(&args, 0));
        // The lock is not held across the model call; one loop drives a session.
        let mut state = self.visual_state();
        let result = evaluate_image(
            &image,
            str_arg(&args, 1),
            str_arg(&args, 2),
            &mut state,
            self.llm.as_ref(),
            &self.judge_model,
            self.recorder.as_deref(),
        )
        .await;
        self.visual.lock().expect("poisoned").evaluation_cnt = state.evaluation_cnt;
        Ok(Value::String(result?))
    }
}
