//! Stateful code execution sessions.
//!
//! A [`Kernel`] owns one interpreter state. Cells in an action run in order
//! and execution stops at the first error. Three backends share the trait:
//! a local interpreter subprocess, a remote kernel gateway, and a
//! deterministic rule-based simulator used by tests and benches.

mod gateway;
mod local;
pub mod sim;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cell::{Cell, CellOutput};
use crate::fst::Feedback;

pub use gateway::{GatewayConfig, GatewayKernel};
pub use local::{LocalConfig, LocalKernel};
pub use sim::{SimConfig, SimKernel};

/// Error name reported when an action exceeds its time limit.
pub const TIMEOUT_ERROR: &str = "Timeout";
/// Error name reported when execution is interrupted on request.
pub const INTERRUPTED_ERROR: &str = "Interrupted";
/// Grace period between an interrupt and a forced kill on timeout.
pub const KILL_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Local,
    Gateway,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelInfo {
    pub backend: BackendKind,
    pub session_id: String,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    /// Outputs per input cell; markdown and unexecuted cells get none.
    pub outputs: Vec<Vec<CellOutput>>,
    pub feedback: Feedback,
    pub elapsed_ms: u64,
    /// Index of the cell that failed; later cells were not run.
    pub aborted_at_cell: Option<usize>,
}

impl ExecResult {
    /// Result for an action with nothing to execute.
    pub fn empty(cells: usize) -> Self {
        Self {
            outputs: vec![Vec::new(); cells],
            feedback: Feedback::NoError,
            elapsed_ms: 0,
            aborted_at_cell: None,
        }
    }

    /// Copies captured outputs onto the executed cells.
    pub fn attach_to(&self, cells: &mut [Cell]) {
        for (cell, outs) in cells.iter_mut().zip(&self.outputs) {
            if cell.is_code() {
                cell.outputs = outs.clone();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("execution backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("kernel is dead")]
    KernelDead,
    #[error("kernel protocol error: {0}")]
    Protocol(String),
}

/// An exception raised into executed code by a failing tool call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallError {
    pub ename: String,
    pub evalue: String,
}

impl ToolCallError {
    pub fn new(ename: impl Into<String>, evalue: impl Into<String>) -> Self {
        Self {
            ename: ename.into(),
            evalue: evalue.into(),
        }
    }
}

/// Engine-side implementation of functions callable from executed code.
#[async_trait]
pub trait ToolHost: Send + Sync {
    /// Names of the functions this host serves.
    fn tool_names(&self) -> Vec<String>;

    async fn call(&self, name: &str, args: Value) -> Result<Value, ToolCallError>;
}

#[async_trait]
pub trait Kernel: Send + Sync {
    fn info(&self) -> &KernelInfo;

    /// Runs the code cells of an action. Markdown cells are skipped.
    async fn execute_cells(
        &self,
        cells: &[Cell],
        timeout: Duration,
        tools: Option<Arc<dyn ToolHost>>,
    ) -> Result<ExecResult, ExecError>;

    /// Interrupts a running execution. Returns whether anything was running.
    async fn interrupt(&self) -> Result<bool, ExecError>;

    async fn shutdown(&self) -> Result<(), ExecError>;

    fn is_alive(&self) -> bool;

    /// Cumulative time spent executing on this handle.
    fn wall_time(&self) -> Duration;
}

/// Error iff some output is on the error channel or the run ended abnormally.
pub fn classify_feedback(outputs: &[Vec<CellOutput>], cells: &[Cell], abnormal: Option<(&str, &str)>) -> Feedback {
    for (i, outs) in outputs.iter().enumerate() {
        if let Some(err) = outs.iter().find(|o| o.is_error()) {
            return Feedback::error(
                err.error_name.clone().unwrap_or_default(),
                err.error_value.clone().unwrap_or_default(),
                cells.get(i).map(|c| c.id.clone()),
            );
        }
    }
    match abnormal {
        Some((name, value)) => Feedback::error(name, value, None),
        None => Feedback::NoError,
    }
}

/// Merges consecutive same-stream outputs so chunked writes read as one.
pub(crate) fn push_output(outs: &mut Vec<CellOutput>, out: CellOutput) {
    if let Some(last) = outs.last_mut() {
        if last.channel == out.channel
            && matches!(out.channel, crate::cell::OutputChannel::Stdout | crate::cell::OutputChannel::Stderr)
        {
            last.text.push_str(&out.text);
            return;
        }
    }
    outs.push(out);
}

/// Which backend to start and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum BackendConfig {
    Local(LocalConfig),
    Gateway(GatewayConfig),
    Sim(SimConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Local(LocalConfig::default())
    }
}

impl BackendConfig {
    pub fn kind(&self) -> BackendKind {
        match self {
            BackendConfig::Local(_) => BackendKind::Local,
            BackendConfig::Gateway(_) => BackendKind::Gateway,
            BackendConfig::Sim(_) => BackendKind::Sim,
        }
    }
}

/// Starts a live kernel with empty interpreter state in `workdir`.
pub async fn start_session(config: &BackendConfig, workdir: &Path) -> Result<Arc<dyn Kernel>, ExecError> {
    std::fs::create_dir_all(workdir).map_err(|e| ExecError::BackendUnavailable(format!("workdir: {e}")))?;
    Ok(match config {
        BackendConfig::Local(c) => Arc::new(LocalKernel::start(c, workdir).await?),
        BackendConfig::Gateway(c) => Arc::new(GatewayKernel::start(c, workdir).await?),
        BackendConfig::Sim(c) => Arc::new(SimKernel::start(c, workdir)?),
    })
}
