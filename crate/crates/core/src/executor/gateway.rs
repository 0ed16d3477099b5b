//! Remote kernel-gateway backend.
//!
//! `POST {base}/api/kernels` creates a kernel; cells are sent as
//! `execute_request` messages over `ws(s)://{base}/api/kernels/{id}/channels`.
//! Replies map to outputs as follows:
//!
//! | message                          | output                          |
//! |----------------------------------|---------------------------------|
//! | `stream` (name, text)            | stdout / stderr                 |
//! | `display_data`, `execute_result` | rich; `image/png` saved to file |
//! | `error` (ename, evalue, tb)      | error                           |
//! | `status` idle                    | cell complete                   |

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use futures::stream::{SplitSink, StreamExt};
use futures::SinkExt;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, Mutex};
use tokio::time::Instant;
use tokio_tungstenite::tungstenite::client::IntoClientRequest;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use super::{
    classify_feedback, push_output, BackendKind, ExecError, ExecResult, Kernel, KernelInfo, ToolHost,
    INTERRUPTED_ERROR, KILL_GRACE, TIMEOUT_ERROR,
};
use crate::cell::{Cell, CellOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub base_url: String,
    #[serde(default, skip_serializing)]
    pub token: Option<String>,
    #[serde(default = "default_kernel_name")]
    pub kernel_name: String,
    /// Messaging protocol version stamped on every request header.
    #[serde(default = "default_protocol")]
    pub protocol_version: String,
    #[serde(default = "default_connect_timeout")]
    pub connect_timeout_secs: u64,
}

fn default_kernel_name() -> String {
    "python3".into()
}

fn default_protocol() -> String {
    "5.3".into()
}

fn default_connect_timeout() -> u64 {
    10
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8888".into(),
            token: None,
            kernel_name: default_kernel_name(),
            protocol_version: default_protocol(),
            connect_timeout_secs: default_connect_timeout(),
        }
    }
}

type WsSink = SplitSink<WebSocketStream<MaybeTlsStream<TcpStream>>, Message>;

pub struct GatewayKernel {
    info: KernelInfo,
    config: GatewayConfig,
    http: reqwest::Client,
    kernel_id: String,
    client_session: String,
    sink: Mutex<WsSink>,
    messages: Mutex<mpsc::UnboundedReceiver<Value>>,
    busy: AtomicBool,
    alive: Arc<AtomicBool>,
    wall_ms: AtomicU64,
}

fn strip_ansi(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\u{1b}' && chars.peek() == Some(&'[') {
            chars.next();
            for d in chars.by_ref() {
                if d.is_ascii_alphabetic() {
                    break;
                }
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl GatewayKernel {
    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn authed(&self, req: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.config.token {
            Some(t) => req.header("Authorization", format!("token {t}")),
            None => req,
        }
    }

    pub async fn start(config: &GatewayConfig, workdir: &Path) -> Result<Self, ExecError> {
        let unavailable = |e: String| ExecError::BackendUnavailable(e);
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(config.connect_timeout_secs))
            .build()
            .map_err(|e| unavailable(e.to_string()))?;
        let base = config.base_url.trim_end_matches('/');
        let mut req = http.post(format!("{base}/api/kernels")).json(&json!({"name": config.kernel_name}));
        if let Some(t) = &config.token {
            req = req.header("Authorization", format!("token {t}"));
        }
        let resp = req.send().await.map_err(|e| unavailable(format!("creating kernel: {e}")))?;
        if !resp.status().is_success() {
            return Err(unavailable(format!("creating kernel: HTTP {}", resp.status())));
        }
        let body: Value = resp.json().await.map_err(|e| unavailable(e.to_string()))?;
        let kernel_id = body["id"]
            .as_str()
            .ok_or_else(|| unavailable("kernel id missing from response".into()))?
            .to_string();

        let ws_base = if let Some(rest) = base.strip_prefix("https://") {
            format!("wss://{rest}")
        } else if let Some(rest) = base.strip_prefix("http://") {
            format!("ws://{rest}")
        } else {
            base.to_string()
        };
        let mut request = format!("{ws_base}/api/kernels/{kernel_id}/channels")
            .into_client_request()
            .map_err(|e| unavailable(e.to_string()))?;
        if let Some(t) = &config.token {
            request.headers_mut().insert(
                "Authorization",
                format!("token {t}").parse().map_err(|_| unavailable("bad token".into()))?,
            );
        }
        let connect = tokio_tungstenite::connect_async(request);
        let (ws, _) = tokio::time::timeout(Duration::from_secs(config.connect_timeout_secs), connect)
            .await
            .map_err(|_| unavailable("websocket connect timed out".into()))?
            .map_err(|e| unavailable(format!("websocket: {e}")))?;
        let (sink, mut stream) = ws.split();
        let alive = Arc::new(AtomicBool::new(true));
        let (tx, rx) = mpsc::unbounded_channel();
        let reader_alive = alive.clone();
        tokio::spawn(async move {
            while let Some(Ok(msg)) = stream.next().await {
                let text = match msg {
                    Message::Text(t) => t,
                    Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
                    Message::Close(_) => break,
                    _ => continue,
                };
                if let Ok(v) = serde_json::from_str::<Value>(&text) {
                    if tx.send(v).is_err() {
                        break;
                    }
                }
            }
            reader_alive.store(false, Ordering::SeqCst);
        });

        Ok(Self {
            info: KernelInfo {
                backend: BackendKind::Gateway,
                session_id: kernel_id.clone(),
                workdir: workdir.to_path_buf(),
            },
            config: config.clone(),
            http,
            kernel_id,
            client_session: uuid::Uuid::new_v4().to_string(),
            sink: Mutex::new(sink),
            messages: Mutex::new(rx),
            busy: AtomicBool::new(false),
            alive,
            wall_ms: AtomicU64::new(0),
        })
    }

    fn execute_request(&self, msg_id: &str, code: &str) -> Value {
        json!({
            "header": {
                "msg_id": msg_id,
                "username": "cellwise",
                "session": self.client_session,
                "msg_type": "execute_request",
                "version": self.config.protocol_version,
                "date": chrono::Utc::now().to_rfc3339(),
            },
            "parent_header": {},
            "metadata": {},
            "content": {
                "code": code,
                "silent": false,
                "store_history": true,
                "user_expressions": {},
                "allow_stdin": false,
                "stop_on_error": true,
            },
            "channel": "shell",
        })
    }

    async fn post_interrupt(&self) -> Result<(), ExecError> {
        let resp = self
            .authed(self.http.post(self.url(&format!("/api/kernels/{}/interrupt", self.kernel_id))))
            .send()
            .await
            .map_err(|e| ExecError::Protocol(e.to_string()))?;
        if resp.status().as_u16() == 404 {
            self.alive.store(false, Ordering::SeqCst);
            return Err(ExecError::KernelDead);
        }
        Ok(())
    }

    async fn delete_kernel(&self) {
        self.alive.store(false, Ordering::SeqCst);
        let _ = self
            .authed(self.http.delete(self.url(&format!("/api/kernels/{}", self.kernel_id))))
            .send()
            .await;
    }

    fn save_png(&self, cell_id: &str, k: usize, b64: &str) -> Option<String> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64.split_whitespace().collect::<String>())
            .ok()?;
        let rel = format!("outputs/{cell_id}-{k}.png");
        let full = self.info.workdir.join(&rel);
        std::fs::create_dir_all(full.parent()?).ok()?;
        std::fs::write(&full, bytes).ok()?;
        Some(rel)
    }
}

#[async_trait]
impl Kernel for GatewayKernel {
    fn info(&self) -> &KernelInfo {
        &self.info
    }

    async fn execute_cells(
        &self,
        cells: &[Cell],
        timeout: Duration,
        _tools: Option<Arc<dyn ToolHost>>,
    ) -> Result<ExecResult, ExecError> {
        if !self.is_alive() {
            return Err(ExecError::KernelDead);
        }
        let mut messages = self.messages.lock().await;
        while messages.try_recv().is_ok() {}
        self.busy.store(true, Ordering::SeqCst);
        let start = Instant::now();
        let deadline = start + timeout;
        let mut outputs = vec![Vec::new(); cells.len()];
        let mut aborted = None;
        let mut timed_out = false;

        'cells: for (i, cell) in cells.iter().enumerate() {
            if !cell.is_code() {
                continue;
            }
            let msg_id = uuid::Uuid::new_v4().to_string();
            let req = self.execute_request(&msg_id, &cell.source);
            if let Err(e) = self.sink.lock().await.send(Message::Text(req.to_string())).await {
                self.busy.store(false, Ordering::SeqCst);
                self.alive.store(false, Ordering::SeqCst);
                return Err(ExecError::Protocol(e.to_string()));
            }
            let mut figures = 0;
            loop {
                let msg = if !timed_out {
                    tokio::select! {
                        m = messages.recv() => m,
                        _ = tokio::time::sleep_until(deadline) => {
                            timed_out = true;
                            let _ = self.post_interrupt().await;
                            continue;
                        }
                    }
                } else {
                    tokio::select! {
                        m = messages.recv() => m,
                        _ = tokio::time::sleep_until(deadline + KILL_GRACE) => None,
                    }
                };
                let Some(msg) = msg else {
                    if timed_out {
                        self.delete_kernel().await;
                        outputs[i].push(CellOutput::error(TIMEOUT_ERROR, "execution exceeded limit; kernel shut down", vec![]));
                    } else {
                        self.alive.store(false, Ordering::SeqCst);
                        outputs[i].push(CellOutput::error("KernelDied", "gateway connection closed", vec![]));
                    }
                    aborted = Some(i);
                    break 'cells;
                };
                if msg["parent_header"]["msg_id"].as_str() != Some(msg_id.as_str()) {
                    continue;
                }
                let content = &msg["content"];
                let s = |k: &str| content[k].as_str().unwrap_or_default().to_string();
                let msg_type = msg["header"]["msg_type"].as_str().or(msg["msg_type"].as_str()).unwrap_or_default();
                match msg_type {
                    "stream" => {
                        let out = if s("name") == "stderr" {
                            CellOutput::stderr(s("text"))
                        } else {
                            CellOutput::stdout(s("text"))
                        };
                        push_output(&mut outputs[i], out);
                    }
                    "display_data" | "execute_result" => {
                        let data = &content["data"];
                        if let Some(png) = data["image/png"].as_str() {
                            figures += 1;
                            match self.save_png(cell.id.as_str(), figures, png) {
                                Some(path) => outputs[i].push(CellOutput::rich("image/png", "<Figure>", Some(path))),
                                None => push_output(&mut outputs[i], CellOutput::stderr("could not store image output\n")),
                            }
                        } else if let Some(text) = data["text/plain"].as_str() {
                            outputs[i].push(CellOutput::rich("text/plain", text, None));
                        }
                    }
                    "error" => {
                        let (mut name, mut value) = (s("ename"), s("evalue"));
                        if name == "KeyboardInterrupt" {
                            if timed_out {
                                name = TIMEOUT_ERROR.into();
                                value = format!("execution exceeded {} s", timeout.as_secs_f64());
                            } else {
                                name = INTERRUPTED_ERROR.into();
                                value = "execution interrupted".into();
                            }
                        }
                        let tb = content["traceback"]
                            .as_array()
                            .map(|a| a.iter().filter_map(Value::as_str).map(strip_ansi).collect())
                            .unwrap_or_default();
                        outputs[i].push(CellOutput::error(name, value, tb));
                    }
                    "status" if content["execution_state"] == "idle" => break,
                    _ => {}
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
        let feedback = classify_feedback(&outputs, cells, None);
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
        self.post_interrupt().await?;
        Ok(true)
    }

    async fn shutdown(&self) -> Result<(), ExecError> {
        let _ = self.sink.lock().await.close().await;
        self.delete_kernel().await;
        Ok(())
    }

    fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    fn wall_time(&self) -> Duration {
        Duration::from_millis(self.wall_ms.load(Ordering::SeqCst))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ansi_codes_removed() {
        assert_eq!(strip_ansi("\u{1b}[0;31mValueError\u{1b}[0m: x"), "ValueError: x");
    }

    #[tokio::test]
    async fn unreachable_gateway_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GatewayConfig {
            base_url: "http://127.0.0.1:9".into(),
            connect_timeout_secs: 2,
            ..GatewayConfig::default()
        };
        assert!(matches!(
            GatewayKernel::start(&cfg, dir.path()).await,
            Err(ExecError::BackendUnavailable(_))
        ));
    }
}
