use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use cellwise_core::config::{read_script, FileConfig, Overrides, ProviderKind};
use cellwise_core::eval::{
    copy_dir, load_manifests, render_stats_table, run_benchmark, transition_stats, BenchOptions, DepsFactory,
    TaskManifest,
};
use cellwise_core::executor::{start_session, BackendConfig};
use cellwise_core::llm::{LlmProvider, ScriptedProvider};
use cellwise_core::notebook::{export_notebook, SessionMeta};
use cellwise_core::orchestrator::{run_task, Deps, Session, SessionError, SessionResult};
use cellwise_core::prompts::PromptCatalog;
use cellwise_core::replay::{config_from_echo, echoed_config, replay_transcript};
use cellwise_core::service::{router, FileConfigFactory, ServiceState, TRANSCRIPT_PATH};
use cellwise_core::transcript::{notebook_trace, read_transcript, write_transcript, Event, Outcome, TranscriptLog};
use serde_json::Value;

use crate::Command;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_ABORTED: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

pub const NOTEBOOK_PATH: &str = ".cellwise/notebook.ipynb";

#[derive(Debug)]
pub struct Fail {
    pub code: u8,
    pub message: String,
}

fn usage(e: impl Display) -> Fail {
    Fail {
        code: EXIT_USAGE,
        message: e.to_string(),
    }
}

fn failure(e: impl Display) -> Fail {
    Fail {
        code: EXIT_FAILURE,
        message: e.to_string(),
    }
}

type Result<T> = std::result::Result<T, Fail>;

pub async fn dispatch(config: Option<PathBuf>, command: Command) -> Result<u8> {
    let load = |overrides: Overrides| -> Result<FileConfig> {
        let mut file = match &config {
            Some(p) => FileConfig::load(p).map_err(usage)?,
            None => FileConfig::default(),
        };
        file.apply(&overrides).map_err(usage)?;
        Ok(file)
    };
    match command {
        Command::Run {
            instruction,
            workdir,
            overrides,
        } => run(load(overrides.into())?, &instruction, &workdir).await,
        Command::Resume {
            transcript,
            followup,
            workdir,
            overrides,
        } => {
            let overrides: Overrides = overrides.into();
            let backend_override = overrides.backend.is_some();
            resume(load(overrides)?, backend_override, &transcript, &followup, workdir).await
        }
        Command::Replay {
            transcript,
            prompts,
            inputs,
            backend,
            out,
        } => {
            let backend_override = backend.is_some();
            let file = load(Overrides {
                backend,
                ..Overrides::default()
            })?;
            replay(file, backend_override, &transcript, prompts.as_deref(), inputs.as_deref(), out.as_deref()).await
        }
        Command::Bench {
            tasks,
            limit_seconds,
            workers,
            out,
            overrides,
        } => bench(load(overrides.into())?, &tasks, limit_seconds, workers, &out).await,
        Command::Stats { transcripts, json } => stats(&transcripts, json),
        Command::ExportNotebook {
            transcript,
            out,
            workdir,
        } => {
            let events = read_transcript(&transcript).map_err(failure)?;
            let workdir = workdir.or_else(|| workdir_of(&transcript));
            write_notebook(&events, workdir.as_deref(), &out)?;
            println!("notebook: {}", out.display());
            Ok(EXIT_OK)
        }
        Command::Serve {
            port,
            host,
            sessions_dir,
            overrides,
        } => serve(load(overrides.into())?, &host, port, sessions_dir).await,
    }
}

/// `<workdir>` for a transcript stored at `<workdir>/.cellwise/transcript.jsonl`.
fn workdir_of(transcript: &Path) -> Option<PathBuf> {
    let dir = transcript.parent()?;
    if dir.file_name()? != ".cellwise" {
        return None;
    }
    Some(dir.parent().map(Path::to_path_buf).unwrap_or_default())
}

async fn deps_for(file: &FileConfig, backend: &BackendConfig, workdir: &Path, llm: Arc<dyn LlmProvider>) -> Result<Deps> {
    let kernel = start_session(backend, workdir).await.map_err(failure)?;
    Ok(Deps {
        llm,
        kernel,
        prompts: Arc::new(file.prompts().map_err(usage)?),
        prices: file.prices.clone(),
        tools: file.tools().map_err(usage)?,
        echo_extra: serde_json::json!({ "backend": backend_echo(backend) }),
    })
}

/// The backend as recorded in transcripts, without the gateway token.
fn backend_echo(backend: &BackendConfig) -> Value {
    let mut b = backend.clone();
    if let BackendConfig::Gateway(g) = &mut b {
        g.token = None;
    }
    serde_json::to_value(b).unwrap_or(Value::Null)
}

/// The recorded backend with its token refilled from the environment.
fn recorded_backend(file: &FileConfig, echo: &Value) -> Result<BackendConfig> {
    let Some(v) = echo.get("backend") else {
        return Ok(file.backend());
    };
    let mut backend: BackendConfig = serde_json::from_value(v.clone()).map_err(|e| failure(format!("recorded backend: {e}")))?;
    if let BackendConfig::Gateway(g) = &mut backend {
        if g.token.is_none() {
            g.token = std::env::var(&file.executor.token_env).ok();
        }
    }
    Ok(backend)
}

fn read_instruction(arg: &str) -> Result<String> {
    if arg == "-" {
        let mut s = String::new();
        std::io::Read::read_to_string(&mut std::io::stdin(), &mut s).map_err(failure)?;
        Ok(s)
    } else {
        std::fs::read_to_string(arg).map_err(|e| usage(format!("{arg}: {e}")))
    }
}

fn outcome_name(o: Outcome) -> String {
    serde_json::to_value(o)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Prints the summary and both output paths, and picks the exit code.
fn finish(result: std::result::Result<SessionResult, SessionError>, log: &TranscriptLog, workdir: &Path, transcript: &Path) -> Result<u8> {
    let notebook = workdir.join(NOTEBOOK_PATH);
    let events = log.snapshot();
    if let Err(e) = write_notebook(&events, Some(workdir), &notebook) {
        eprintln!("warning: notebook not written: {}", e.message);
    }
    let code = match &result {
        Ok(r) => {
            for cell in &r.summary {
                println!("{}\n", cell.source);
            }
            println!("outcome: {}", outcome_name(r.outcome));
            if let Some(reason) = &r.reason {
                println!("reason: {reason}");
            }
            println!("cost: {}", r.session_cost);
            if r.outcome == Outcome::Aborted {
                EXIT_ABORTED
            } else {
                EXIT_OK
            }
        }
        Err(SessionError::Config(m)) => {
            eprintln!("error: invalid config: {m}");
            EXIT_USAGE
        }
        Err(SessionError::EmptyInstruction) => {
            eprintln!("error: instruction is empty");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ABORTED
        }
    };
    println!("transcript: {}", transcript.display());
    if notebook.exists() {
        println!("notebook: {}", notebook.display());
    }
    Ok(code)
}

async fn run(file: FileConfig, instruction: &str, workdir: &Path) -> Result<u8> {
    let text = read_instruction(instruction)?;
    std::fs::create_dir_all(workdir).map_err(failure)?;
    let workdir = workdir.canonicalize().map_err(failure)?;
    let llm = file.provider().map_err(usage)?;
    let transcript = workdir.join(TRANSCRIPT_PATH);
    std::fs::create_dir_all(transcript.parent().expect("nested path")).map_err(failure)?;
    // Created first so a transcript exists whatever happens next.
    let log = TranscriptLog::create(&transcript).map_err(failure)?;
    let deps = deps_for(&file, &file.backend(), &workdir, llm).await?;
    let result = run_task(&text, file.session_config(&workdir), deps, log.clone()).await.map(|(_, r)| r);
    finish(result, &log, &workdir, &transcript)
}

async fn resume(file: FileConfig, backend_override: bool, transcript: &Path, followup: &str, workdir: Option<PathBuf>) -> Result<u8> {
    let workdir = workdir
        .or_else(|| workdir_of(transcript))
        .ok_or_else(|| usage("cannot infer the workdir from the transcript path; pass --workdir"))?;
    let events = read_transcript(transcript).map_err(failure)?;
    let echo = echoed_config(&events).map_err(failure)?;
    let (config, _, _, extra) = config_from_echo(echo, &workdir).map_err(failure)?;
    let backend = if backend_override {
        file.backend()
    } else {
        recorded_backend(&file, &extra)?
    };
    let llm = file.provider().map_err(usage)?;
    let deps = deps_for(&file, &backend, &workdir, llm).await?;
    let log = TranscriptLog::resume(transcript, events.clone()).map_err(failure)?;
    let result = match Session::restore(config, deps, log.clone(), &events).await {
        Ok(mut session) => session.run_instruction(followup).await,
        Err(e) => Err(e),
    };
    finish(result, &log, &workdir, transcript)
}

async fn replay(
    file: FileConfig,
    backend_override: bool,
    transcript: &Path,
    prompts: Option<&Path>,
    inputs: Option<&Path>,
    out: Option<&Path>,
) -> Result<u8> {
    let recorded = read_transcript(transcript).map_err(failure)?;
    let echo = echoed_config(&recorded).map_err(failure)?;
    let backend = if backend_override {
        file.backend()
    } else {
        recorded_backend(&file, echo)?
    };
    let prompts = match prompts {
        Some(dir) => PromptCatalog::load_dir(dir).map_err(usage)?,
        None => file.prompts().map_err(usage)?,
    };
    // Everything the replay touches lives under this directory.
    let scratch = tempfile::tempdir().map_err(failure)?;
    if let Some(inputs) = inputs {
        copy_dir(inputs, scratch.path()).map_err(|e| usage(format!("{}: {e}", inputs.display())))?;
    }
    let kernel = start_session(&backend, scratch.path()).await.map_err(failure)?;
    let (report, replayed) = replay_transcript(&recorded, prompts, kernel.clone(), scratch.path())
        .await
        .map_err(failure)?;
    let _ = kernel.shutdown().await;
    if let Some(out) = out {
        write_transcript(out, &replayed).map_err(failure)?;
    }
    println!("recorded events: {}", report.recorded_events);
    println!("replayed events: {}", report.replayed_events);
    if report.identical() {
        println!("replay: identical");
        return Ok(EXIT_OK);
    }
    match report.diverged_at {
        Some(i) => {
            println!("replay: diverged at event {i}");
            println!("expected: {}", report.expected.as_deref().unwrap_or("<end of transcript>"));
            println!("actual:   {}", report.actual.as_deref().unwrap_or("<end of transcript>"));
        }
        None => println!("replay: {} recorded model calls were never made", report.unused_calls),
    }
    Ok(EXIT_DIVERGED)
}

/// Per-task dependencies for benchmarks. A scripted provider reads
/// `scripts/<task id>.json` next to the manifests when it exists.
struct BenchDeps {
    file: FileConfig,
    task_dir: PathBuf,
}

#[async_trait]
impl DepsFactory for BenchDeps {
    async fn deps(&self, task: &TaskManifest, workdir: &Path) -> std::result::Result<Deps, String> {
        let script = self.task_dir.join("scripts").join(format!("{}.json", task.id));
        let llm: Arc<dyn LlmProvider> = if self.file.model.provider == ProviderKind::Scripted && script.is_file() {
            Arc::new(ScriptedProvider::from_replies(read_script(&script).map_err(|e| e.to_string())?))
        } else {
            self.file.provider().map_err(|e| e.to_string())?
        };
        deps_for(&self.file, &self.file.backend(), workdir, llm).await.map_err(|f| f.message)
    }
}

async fn bench(file: FileConfig, tasks: &Path, limit_secs: f64, workers: usize, out: &Path) -> Result<u8> {
    if !(limit_secs > 0.0) {
        return Err(usage("--limit-seconds must be positive"));
    }
    let manifests = load_manifests(tasks).map_err(|e| usage(format!("{}: {e}", tasks.display())))?;
    if manifests.is_empty() {
        println!("no task manifests in {}; nothing to run", tasks.display());
        return Ok(EXIT_OK);
    }
    std::fs::create_dir_all(out).map_err(failure)?;
    let out = out.canonicalize().map_err(failure)?;
    let options = BenchOptions {
        config: file.session_config(&out),
        limit_secs,
        out_dir: out.clone(),
        workers: workers.max(1),
    };
    let factory = Arc::new(BenchDeps {
        file,
        task_dir: tasks.to_path_buf(),
    });
    let report = run_benchmark(tasks, &options, factory).await.map_err(failure)?;
    let json = serde_json::to_string_pretty(&report).map_err(failure)?;
    std::fs::write(out.join("report.json"), json).map_err(failure)?;
    let table = report.render_table();
    std::fs::write(out.join("report.md"), &table).map_err(failure)?;
    print!("{table}");
    println!("report: {}", out.join("report.json").display());
    Ok(EXIT_OK)
}

fn stats(patterns: &[String], json: bool) -> Result<u8> {
    let mut rows = Vec::new();
    for arg in patterns {
        let (label, pattern) = match arg.split_once('=') {
            Some((l, p)) if !l.is_empty() => (l.to_string(), p),
            _ => (arg.clone(), arg.as_str()),
        };
        let mut paths: Vec<PathBuf> = glob::glob(pattern)
            .map_err(|e| usage(format!("{pattern}: {e}")))?
            .filter_map(|p| p.ok())
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(usage(format!("no transcripts match {pattern}")));
        }
        let mut transcripts = Vec::with_capacity(paths.len());
        for p in &paths {
            transcripts.push(read_transcript(p).map_err(|e| failure(format!("{}: {e}", p.display())))?);
        }
        let row = transition_stats(&transcripts)
            .map_err(|e| failure(format!("{}: {}", paths[e.index].display(), e.message)))?;
        rows.push((label, row));
    }
    if json {
        let v: Vec<Value> = rows
            .iter()
            .map(|(label, s)| serde_json::json!({ "label": label, "stats": s }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&v).map_err(failure)?);
    } else {
        print!("{}", render_stats_table(&rows));
    }
    Ok(EXIT_OK)
}

fn write_notebook(events: &[Event], workdir: Option<&Path>, out: &Path) -> Result<()> {
    let trace = notebook_trace(events).map_err(failure)?;
    let echo = echoed_config(events).ok();
    let field = |k: &str, default: &str| {
        echo.and_then(|e| e.get(k))
            .and_then(Value::as_str)
            .unwrap_or(default)
            .to_string()
    };
    let meta = SessionMeta {
        session_id: workdir
            .and_then(|w| w.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "session".into()),
        model: field("model", ""),
        language: field("code_tag", "python"),
        workdir: workdir.map(Path::to_path_buf),
    };
    let nb = export_notebook(&trace, &meta).map_err(failure)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(failure)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&nb).map_err(failure)?).map_err(failure)
}

async fn serve(file: FileConfig, host: &str, port: u16, sessions_dir: Option<PathBuf>) -> Result<u8> {
    let dir = sessions_dir.unwrap_or_else(|| file.service.sessions_dir.clone());
    std::fs::create_dir_all(&dir).map_err(failure)?;
    let token = std::env::var(&file.service.token_env).ok().filter(|t| !t.is_empty());
    if token.is_none() {
        tracing::warn!(env = %file.service.token_env, "no API token set; requests are not authenticated");
    }
    let factory = Arc::new(FileConfigFactory { config: file, llm: None });
    let state = ServiceState::new(factory, dir, token);
    let restored = state.recover().await;
    if !restored.is_empty() {
        println!("restored {} session(s)", restored.len());
    }
    let listener = tokio::net::TcpListener::bind((host, port)).await.map_err(failure)?;
    println!("listening on http://{}", listener.local_addr().map_err(failure)?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(failure)?;
    Ok(EXIT_OK)
}
