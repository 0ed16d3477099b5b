//! Scoring, benchmark runs and transition statistics.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use futures::StreamExt;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fst::AgentState;
use crate::orchestrator::{run_task, Deps, SessionConfig};
use crate::transcript::{validate_transcript, CallPurpose, Event, EventBody, Outcome, TranscriptLog};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("no results to score")]
    Empty,
    #[error("question {0} has no subquestions")]
    NoSubquestions(String),
    #[error("entry {0} has best score equal to baseline")]
    DegenerateBounds(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub id: String,
    pub correct: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisScores {
    pub pasq: f64,
    pub abq: f64,
    pub uasq: f64,
}

pub fn score_analysis(results: &[QuestionResult]) -> Result<AnalysisScores, MetricError> {
    if results.is_empty() {
        return Err(MetricError::Empty);
    }
    let (mut pasq, mut abq) = (0.0, 0.0);
    let (mut correct, mut total) = (0usize, 0usize);
    for q in results {
        if q.correct.is_empty() {
            return Err(MetricError::NoSubquestions(q.id.clone()));
        }
        let k = q.correct.iter().filter(|c| **c).count();
        pasq += k as f64 / q.correct.len() as f64;
        if k == q.correct.len() {
            abq += 1.0;
        }
        correct += k;
        total += q.correct.len();
    }
    let n = results.len() as f64;
    Ok(AnalysisScores {
        pasq: pasq / n,
        abq: abq / n,
        uasq: correct as f64 / total as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelingEntry {
    pub p: f64,
    pub b: f64,
    pub g: f64,
    pub completed: bool,
    pub elapsed_secs: f64,
    /// Error-style metric; values are negated before scoring.
    #[serde(default)]
    pub lower_is_better: bool,
}

/// Mean of clamped normalized gains. Incomplete entries score as baseline.
pub fn score_rpg(entries: &[ModelingEntry]) -> Result<f64, MetricError> {
    if entries.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sum = 0.0;
    for (i, e) in entries.iter().enumerate() {
        let sign = if e.lower_is_better { -1.0 } else { 1.0 };
        let (b, g) = (sign * e.b, sign * e.g);
        let p = if e.completed { sign * e.p } else { b };
        if g == b {
            return Err(MetricError::DegenerateBounds(i));
        }
        sum += ((p - b) / (g - b)).max(0.0);
    }
    Ok(sum / entries.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTransitionCounts {
    pub llm_calls: u64,
    pub planning_entries: u64,
    pub repair_entries: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    pub tasks: usize,
    pub avg_llm_calls: f64,
    pub avg_planning_entries: f64,
    pub avg_repair_entries: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("corrupt transcript {index}: {message}")]
pub struct CorruptTranscript {
    pub index: usize,
    pub message: String,
}

/// Agent model calls, plan entries and repair entries of one transcript.
/// Forced moves enter states without a model call.
pub fn transcript_counts(events: &[Event]) -> TaskTransitionCounts {
    let mut c = TaskTransitionCounts::default();
    for e in events {
        match &e.body {
            EventBody::LlmCall(call) if call.purpose == CallPurpose::Agent => c.llm_calls += 1,
            EventBody::Transition(t) if t.to == AgentState::Plan => c.planning_entries += 1,
            EventBody::Transition(t) if t.to == AgentState::Debug && t.from != AgentState::Debug => {
                c.repair_entries += 1
            }
            _ => {}
        }
    }
    c
}

pub fn transition_stats(transcripts: &[Vec<Event>]) -> Result<TransitionStats, CorruptTranscript> {
    let mut total = TaskTransitionCounts::default();
    for (index, t) in transcripts.iter().enumerate() {
        validate_transcript(t).map_err(|e| CorruptTranscript {
            index,
            message: e.to_string(),
        })?;
        let c = transcript_counts(t);
        total.llm_calls += c.llm_calls;
        total.planning_entries += c.planning_entries;
        total.repair_entries += c.repair_entries;
    }
    let n = transcripts.len();
    if n == 0 {
        return Ok(TransitionStats::default());
    }
    let avg = |x: u64| x as f64 / n as f64;
    Ok(TransitionStats {
        tasks: n,
        avg_llm_calls: avg(total.llm_calls),
        avg_planning_entries: avg(total.planning_entries),
        avg_repair_entries: avg(total.repair_entries),
    })
}

pub fn render_stats_table(rows: &[(String, TransitionStats)]) -> String {
    let mut s = String::from("| Run | Tasks | Avg. LLM Calls | Avg. Planning Entries | Avg. Repair Entries |\n");
    s.push_str("|---|---:|---:|---:|---:|\n");
    for (name, st) in rows {
        s.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} | {:.2} |\n",
            name, st.tasks, st.avg_llm_calls, st.avg_planning_entries, st.avg_repair_entries
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Benchmarks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grader {
    ExactAnswer,
    FileExists,
    External,
}

/// Score bounds for tasks that report a modeling score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpgBounds {
    pub baseline: f64,
    pub best: f64,
    #[serde(default)]
    pub lower_is_better: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub id: String,
    /// Relative to the manifest file.
    pub instruction_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dir: Option<PathBuf>,
    /// Relative to the task workdir.
    pub expected_artifact: PathBuf,
    pub grader: Grader,
    /// Expected content for `exact_answer`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    /// Absolute tolerance for numeric answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// For `external`: a shell command given the artifact path as `$1` that
    /// prints a numeric score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grader_command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpg: Option<RpgBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub id: String,
    pub success: bool,
    pub completed: bool,
    pub outcome: Option<Outcome>,
    /// The time limit for incomplete tasks.
    pub elapsed_secs: f64,
    pub cost: Decimal,
    pub counts: TaskTransitionCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpg: Option<RpgBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub tasks: Vec<TaskReport>,
    pub success_rate: f64,
    pub avg_elapsed_secs: f64,
    pub total_cost: Decimal,
    pub stats: TransitionStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpg: Option<f64>,
}

impl BenchReport {
    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn render_table(&self) -> String {
        let mut s = String::from("| Task | Success | Outcome | Time (s) | Cost | LLM Calls | Planning | Repairs |\n");
        s.push_str("|---|:-:|---|---:|---:|---:|---:|---:|\n");
        for t in &self.tasks {
            let outcome = match (&t.outcome, &t.error) {
                (Some(o), _) => serde_json::to_value(o).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                (None, Some(e)) => format!("error: {e}"),
                _ => String::new(),
            };
            s.push_str(&format!(
                "| {} | {} | {} | {:.1} | {} | {} | {} | {} |\n",
                t.id,
                if t.success { "yes" } else { "no" },
                outcome,
                t.elapsed_secs,
                t.cost,
                t.counts.llm_calls,
                t.counts.planning_entries,
                t.counts.repair_entries
            ));
        }
        s.push_str(&format!(
            "\nTask success rate: {:.1}% | Avg. time: {:.1}s | Total cost: {}",
            self.success_rate * 100.0,
            self.avg_elapsed_secs,
            self.total_cost
        ));
        if let Some(rpg) = self.rpg {
            s.push_str(&format!(" | RPG: {:.2}", rpg * 100.0));
        }
        s.push('\n');
        s
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

/// Builds per-task collaborators, such as a fresh kernel in the task workdir.
#[async_trait]
pub trait DepsFactory: Send + Sync {
    async fn deps(&self, task: &TaskManifest, workdir: &Path) -> Result<Deps, String>;
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub config: SessionConfig,
    pub limit_secs: f64,
    /// Receives one directory per task with its workdir and transcript.
    pub out_dir: PathBuf,
    pub workers: usize,
}

/// Reads every `*.json` manifest in `task_dir`, sorted by file name.
pub fn load_manifests(task_dir: &Path) -> Result<Vec<(PathBuf, Result<TaskManifest, ManifestError>)>, std::io::Error> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(task_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.is_file())
        .collect();
    paths.sort();
    Ok(paths
        .into_iter()
        .map(|p| {
            let parsed = std::fs::read_to_string(&p)
                .map_err(|e| e.to_string())
                .and_then(|t| serde_json::from_str::<TaskManifest>(&t).map_err(|e| e.to_string()))
                .map_err(|message| ManifestError::Invalid {
                    path: p.clone(),
                    message,
                });
            (p, parsed)
        })
        .collect())
}

pub async fn run_benchmark(task_dir: &Path, options: &BenchOptions, factory: Arc<dyn DepsFactory>) -> std::io::Result<BenchReport> {
    let manifests = load_manifests(task_dir)?;
    let reports: Vec<TaskReport> = futures::stream::iter(manifests.into_iter().map(|(path, m)| {
        let factory = factory.clone();
        async move {
            match m {
                Ok(m) => run_one(&path, m, options, factory.as_ref()).await,
                Err(e) => TaskReport {
                    id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                    success: false,
                    completed: false,
                    outcome: None,
                    elapsed_secs: options.limit_secs,
                    cost: Decimal::ZERO,
                    counts: TaskTransitionCounts::default(),
                    score: None,
                    error: Some(e.to_string()),
                    transcript: None,
                    rpg: None,
                },
            }
        }
    }))
    .buffered(options.workers.max(1))
    .collect()
    .await;
    Ok(aggregate(reports))
}

fn aggregate(tasks: Vec<TaskReport>) -> BenchReport {
    let n = tasks.len();
    let transcripts: Vec<Vec<Event>> = tasks
        .iter()
        .filter_map(|t| t.transcript.as_ref())
        .filter_map(|p| crate::transcript::read_transcript(p).ok())
        .collect();
    let stats = transition_stats(&transcripts).unwrap_or_else(|e| {
        tracing::warn!(error = %e, "skipping transition statistics");
        TransitionStats::default()
    });
    let rpg_entries: Vec<ModelingEntry> = tasks
        .iter()
        .filter_map(|t| {
            let bounds = t.rpg?;
            Some(ModelingEntry {
                p: t.score.unwrap_or(bounds.baseline),
                b: bounds.baseline,
                g: bounds.best,
                completed: t.completed && t.score.is_some(),
                elapsed_secs: t.elapsed_secs,
                lower_is_better: bounds.lower_is_better,
            })
        })
        .collect();
    BenchReport {
        success_rate: if n == 0 { 0.0 } else { tasks.iter().filter(|t| t.success).count() as f64 / n as f64 },
        avg_elapsed_secs: if n == 0 { 0.0 } else { tasks.iter().map(|t| t.elapsed_secs).sum::<f64>() / n as f64 },
        total_cost: tasks.iter().map(|t| t.cost).sum(),
        rpg: if rpg_entries.is_empty() { None } else { score_rpg(&rpg_entries).ok() },
        stats,
        tasks,
    }
}

/// Recursive copy of a directory tree.
pub fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

async fn run_one(manifest_path: &Path, m: TaskManifest, options: &BenchOptions, factory: &dyn DepsFactory) -> TaskReport {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let task_out = options.out_dir.join(&m.id);
    let workdir = task_out.join("work");
    let transcript_path = task_out.join("transcript.jsonl");
    let mut report = TaskReport {
        id: m.id.clone(),
        success: false,
        completed: false,
        outcome: None,
        elapsed_secs: options.limit_secs,
        cost: Decimal::ZERO,
        counts: TaskTransitionCounts::default(),
        score: None,
        error: None,
        transcript: None,
        rpg: m.rpg,
    };
    let prepared = (|| -> Result<String, String> {
        std::fs::create_dir_all(&workdir).map_err(|e| e.to_string())?;
        if let Some(input) = &m.input_dir {
            copy_dir(&base.join(input), &workdir).map_err(|e| format!("copying inputs: {e}"))?;
        }
        std::fs::read_to_string(base.join(&m.instruction_path)).map_err(|e| format!("instruction: {e}"))
    })();
    let instruction = match prepared {
        Ok(i) => i,
        Err(e) => {
            report.error = Some(e);
            return report;
        }
    };
    let deps = match factory.deps(&m, &workdir).await {
        Ok(d) => d,
        Err(e) => {
            report.error = Some(e);
            return report;
        }
    };
    let kernel = deps.kernel.clone();
    let mut config = options.config.clone();
    config.workdir = workdir.clone();
    config.task_timeout_secs = options.limit_secs;
    let log = match TranscriptLog::create(&transcript_path) {
        Ok(l) => l,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };
    report.transcript = Some(transcript_path);
    match run_task(&instruction, config, deps, log.clone()).await {
        Ok((_, r)) => {
            report.outcome = Some(r.outcome);
            report.cost = r.session_cost;
            report.completed = matches!(r.outcome, Outcome::Fulfilled | Outcome::BudgetStop);
            report.elapsed_secs = if report.completed { r.elapsed.as_secs_f64() } else { options.limit_secs };
            let (ok, score) = grade(&m, &workdir).await;
            report.success = r.outcome != Outcome::Aborted && report.completed && ok;
            report.score = score;
        }
        Err(e) => report.error = Some(e.to_string()),
    }
    report.counts = transcript_counts(&log.snapshot());
    let _ = kernel.shutdown().await;
    report
}

/// Whether the artifact is present and well formed, plus an external score.
async fn grade(m: &TaskManifest, workdir: &Path) -> (bool, Option<f64>) {
    let path = workdir.join(&m.expected_artifact);
    let Ok(content) = std::fs::read(&path) else {
        return (false, None);
    };
    match m.grader {
        Grader::FileExists => (well_formed(&path, &content), None),
        Grader::ExactAnswer => {
            let got = String::from_utf8_lossy(&content);
            let ok = m.answer.as_deref().is_some_and(|want| answers_match(got.trim(), want.trim(), m.tolerance));
            (ok, None)
        }
        Grader::External => {
            if !well_formed(&path, &content) {
                return (false, None);
            }
            let Some(cmd) = m.grader_command.clone() else {
                return (true, None);
            };
            let artifact = path.clone();
            let out = tokio::task::spawn_blocking(move || {
                std::process::Command::new("sh").arg("-c").arg(&cmd).arg("grader").arg(&artifact).output()
            })
            .await;
            let score = out
                .ok()
                .and_then(Result::ok)
                .filter(|o| o.status.success())
                .and_then(|o| String::from_utf8_lossy(&o.stdout).trim().parse::<f64>().ok());
            (score.is_some(), score)
        }
    }
}

fn well_formed(path: &Path, content: &[u8]) -> bool {
    if content.is_empty() {
        return false;
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_slice::<serde_json::Value>(content).is_ok(),
        Some("csv") => {
            let text = String::from_utf8_lossy(content);
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            let Some(header) = lines.next() else { return false };
            let cols = header.split(',').count();
            lines.all(|l| l.split(',').count() == cols)
        }
        _ => true,
    }
}

/// Exact match after trimming, or numeric match within `tolerance`.
pub fn answers_match(got: &str, want: &str, tolerance: Option<f64>) -> bool {
    if got == want {
        return true;
    }
    match (got.parse::<f64>(), want.parse::<f64>()) {
        (Ok(a), Ok(b)) => (a - b).abs() <= tolerance.unwrap_or(0.0),
        _ => false,
    }
}
