//! Local interpreter subprocess backend.
//!
//! One `python3` child per session runs `driver.py`. Both directions use
//! frames of a 4-byte big-endian length followed by a UTF-8 JSON object; the
//! frame types are listed at the top of the driver.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Stdio;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::process::{Child, ChildStdin, Command};
use tokio::sync::{mpsc, Mutex};
use tokio::time::Instant;

use super::{
    classify_feedback, push_output, BackendKind, ExecError, ExecResult, Kernel, KernelInfo, ToolHost,
    INTERRUPTED_ERROR, KILL_GRACE, TIMEOUT_ERROR,
};
use crate::cell::{Cell, CellOutput};

const DRIVER: &str = include_str!("driver.py");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    #[serde(default = "default_python")]
    pub python: String,
    /// Allows package installs from shell escapes inside cells.
    #[serde(default)]
    pub allow_network: bool,
    #[serde(default = "default_startup")]
    pub startup_timeout_secs: u64,
    /// Extra environment for the interpreter.
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

fn default_python() -> String {
    "python3".into()
}

fn default_startup() -> u64 {
    30
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            python: default_python(),
            allow_network: false,
            startup_timeout_secs: default_startup(),
            env: BTreeMap::new(),
        }
    }
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, frame: &Value) -> std::io::Result<()> {
    let body = serde_json::to_vec(frame)?;
    let len = u32::try_from(body.len()).map_err(|_| std::io::Error::other("frame too large"))?;
    let mut buf = Vec::with_capacity(body.len() + 4);
    buf.extend_from_slice(&len.to_be_bytes());
    buf.extend_from_slice(&body);
    w.write_all(&buf).await?;
    w.flush().await
}

pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> std::io::Result<Value> {
    let len = r.read_u32().await?;
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).await?;
    serde_json::from_slice(&body).map_err(std::io::Error::other)
}

pub struct LocalKernel {
    info: KernelInfo,
    child: std::sync::Mutex<Option<Child>>,
    stdin: Mutex<ChildStdin>,
    frames: Mutex<mpsc::UnboundedReceiver<Value>>,
    busy: AtomicBool,
    alive: Arc<AtomicBool>,
    exec_seq: AtomicU64,
    wall_ms: AtomicU64,
}

impl LocalKernel {
    pub async fn start(config: &LocalConfig, workdir: &Path) -> Result<Self, ExecError> {
        let mut cmd = Command::new(&config.python);
        cmd.arg("-u")
            .arg("-c")
            .arg(DRIVER)
            .current_dir(workdir)
            .env_clear()
            .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/bin:/bin".into()))
            .env("HOME", workdir)
            .env("LANG", "C.UTF-8")
            .env("MPLBACKEND", "Agg")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("CELLWISE_ALLOW_NETWORK", if config.allow_network { "1" } else { "0" })
            .envs(&config.env)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true);
        let mut child = cmd
            .spawn()
            .map_err(|e| ExecError::BackendUnavailable(format!("spawning {}: {e}", config.python)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");
        let alive = Arc::new(AtomicBool::new(true));

        tokio::spawn(async move {
            let mut lines = BufReader::new(stderr).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                tracing::debug!(target: "cellwise::kernel", "{line}");
            }
        });
        let (tx, mut rx) = mpsc::unbounded_channel();
        let reader_alive = alive.clone();
        tokio::spawn(async move {
            while let Ok(frame) = read_frame(&mut stdout).await {
                if tx.send(frame).is_err() {
                    break;
                }
            }
            reader_alive.store(false, Ordering::SeqCst);
        });

        let startup = Duration::from_secs(config.startup_timeout_secs);
        match tokio::time::timeout(startup, rx.recv()).await {
            Ok(Some(f)) if f["type"] == "done" && f["status"] == "ready" => {}
            Ok(other) => {
                return Err(ExecError::BackendUnavailable(format!("interpreter did not start: {other:?}")));
            }
            Err(_) => return Err(ExecError::BackendUnavailable("interpreter start timed out".into())),
        }
        Ok(Self {
            info: KernelInfo {
                backend: BackendKind::Local,
                session_id: uuid::Uuid::new_v4().to_string(),
                workdir: workdir.to_path_buf(),
            },
            child: std::sync::Mutex::new(Some(child)),
            stdin: Mutex::new(stdin),
            frames: Mutex::new(rx),
            busy: AtomicBool::new(false),
            alive,
            exec_seq: AtomicU64::new(0),
            wall_ms: AtomicU64::new(0),
        })
    }

    async fn send(&self, frame: Value) -> Result<(), ExecError> {
        let mut stdin = self.stdin.lock().await;
        write_frame(&mut *stdin, &frame).await.map_err(|e| {
            self.alive.store(false, Ordering::SeqCst);
            ExecError::Protocol(format!("writing to interpreter: {e}"))
        })
    }

    fn kill(&self) {
        self.alive.store(false, Ordering::SeqCst);
        if let Some(child) = self.child.lock().expect("poisoned").as_mut() {
            let _ = child.start_kill();
        }
    }

    async fn answer_tool_call(&self, frame: &Value, tools: Option<&Arc<dyn ToolHost>>) -> Result<(), ExecError> {
        let call_id = frame["call_id"].clone();
        let name = frame["name"].as_str().unwrap_or_default();
        let reply = match tools {
            Some(host) if host.tool_names().iter().any(|t| t == name) => {
                match host.call(name, frame["args"].clone()).await {
                    Ok(value) => json!({"type": "tool_result", "call_id": call_id, "ok": true, "value": value}),
                    Err(e) => json!({
                        "type": "tool_result", "call_id": call_id, "ok": false,
                        "ename": e.ename, "evalue": e.evalue,
                    }),
                }
            }
            _ => json!({
                "type": "tool_result", "call_id": call_id, "ok": false,
                "ename": "NameError", "evalue": format!("tool '{name}' is not available"),
            }),
        };
        self.send(reply).await
    }
}

enum CellEnd {
    Done,
    Killed,
    Died,
}

#[async_trait]
impl Kernel for LocalKernel {
    fn info(&self) -> &KernelInfo {
        &self.info
    }

    async fn execute_cells(
        &self,
        cells: &[Cell],
        timeout: Duration,
        tools: Option<Arc<dyn ToolHost>>,
    ) -> Result<ExecResult, ExecError> {
        if !self.is_alive() {
            return Err(ExecError::KernelDead);
        }
        let mut frames = self.frames.lock().await;
        // Drop frames left over from an earlier interrupted exchange.
        while frames.try_recv().is_ok() {}
        self.busy.store(true, Ordering::SeqCst);
        let start = Instant::now();
        let deadline = start + timeout;
        let mut outputs = vec![Vec::new(); cells.len()];
        let mut aborted = None;
        let mut abnormal: Option<(&str, String)> = None;
        let mut timed_out = false;

        'cells: for (i, cell) in cells.iter().enumerate() {
            if !cell.is_code() {
                continue;
            }
            let id = self.exec_seq.fetch_add(1, Ordering::SeqCst);
            if let Err(e) = self.send(json!({"type": "exec", "id": id, "cell_id": cell.id.as_str(), "code": cell.source})).await {
                self.busy.store(false, Ordering::SeqCst);
                return Err(e);
            }
            let end = loop {
                let frame = if !timed_out {
                    tokio::select! {
                        f = frames.recv() => f,
                        _ = tokio::time::sleep_until(deadline) => {
                            timed_out = true;
                            let _ = self.send(json!({"type": "interrupt"})).await;
                            continue;
                        }
                    }
                } else {
                    tokio::select! {
                        f = frames.recv() => f,
                        _ = tokio::time::sleep_until(deadline + KILL_GRACE) => break CellEnd::Killed,
                    }
                };
                let Some(frame) = frame else { break CellEnd::Died };
                let text = |k: &str| frame[k].as_str().unwrap_or_default().to_string();
                match frame["type"].as_str().unwrap_or_default() {
                    "stdout" => push_output(&mut outputs[i], CellOutput::stdout(text("text"))),
                    "stderr" => push_output(&mut outputs[i], CellOutput::stderr(text("text"))),
                    "rich" => outputs[i].push(CellOutput::rich(
                        text("mime"),
                        text("text"),
                        frame["path"].as_str().map(str::to_string),
                    )),
                    "error" => {
                        let mut name = text("ename");
                        let mut value = text("evalue");
                        if name == "KeyboardInterrupt" {
                            if timed_out {
                                name = TIMEOUT_ERROR.into();
                                value = format!("execution exceeded {} s", timeout.as_secs_f64());
                            } else {
                                name = INTERRUPTED_ERROR.into();
                                value = "execution interrupted".into();
                            }
                        }
                        let tb = frame["traceback"]
                            .as_array()
                            .map(|a| a.iter().filter_map(|l| l.as_str().map(str::to_string)).collect())
                            .unwrap_or_default();
                        outputs[i].push(CellOutput::error(name, value, tb));
                    }
                    "tool_call" => {
                        if let Err(e) = self.answer_tool_call(&frame, tools.as_ref()).await {
                            tracing::warn!(error = %e, "tool result not delivered");
                        }
                    }
                    "done" if frame["id"] == json!(id) => break CellEnd::Done,
                    _ => {}
                }
            };
            match end {
                CellEnd::Done => {}
                CellEnd::Killed => {
                    self.kill();
                    outputs[i].push(CellOutput::error(
                        TIMEOUT_ERROR,
                        format!("execution exceeded {} s; interpreter killed", timeout.as_secs_f64()),
                        vec![],
                    ));
                    aborted = Some(i);
                    break 'cells;
                }
                CellEnd::Died => {
                    self.alive.store(false, Ordering::SeqCst);
                    abnormal = Some(("KernelDied", "interpreter exited unexpectedly".into()));
                    outputs[i].push(CellOutput::error("KernelDied", "interpreter exited unexpectedly", vec![]));
                    aborted = Some(i);
                    break 'cells;
                }
            }
            if outputs[i].iter().any(CellOutput::is_error) {
                aborted = Some(i);
                break;
            }
        }
        self.busy.store(false, Ordering::SeqCst);
        let elapsed = start.elapsed();
        self.wall_ms.fetch_add(elapsed.as_millis() as u64, Ordering::SeqCst);
        let feedback = classify_feedback(&outputs, cells, abnormal.as_ref().map(|(n, v)| (*n, v.as_str())));
        Ok(ExecResult {
            outputs,
            feedback,
            elapsed_ms: elapsed.as_millis() as u64,
            aborted_at_cell: aborted,
        })
    }

    async fn interrupt(&self) -> Result<bool, ExecError> {
        if !self.is_alive() {
            return Err(ExecError::KernelDead);
        }
        if !self.busy.load(Ordering::SeqCst) {
            return Ok(false);
        }
        self.send(json!({"type": "interrupt"})).await?;
        Ok(true)
    }

    async fn shutdown(&self) -> Result<(), ExecError> {
        self.kill();
        Ok(())
    }

    fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    fn wall_time(&self) -> Duration {
        Duration::from_millis(self.wall_ms.load(Ordering::SeqCst))
    }
}

impl Drop for LocalKernel {
    fn drop(&mut self) {
        self.kill();
    }
}
