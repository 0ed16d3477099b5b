//! Deterministic re-execution of a recorded session.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::executor::Kernel;
use crate::llm::{LlmProvider, PriceTable, ReplayProvider};
use crate::orchestrator::{Deps, Session, SessionConfig, SessionError};
use crate::prompts::PromptCatalog;
use crate::toolkit::ToolDescriptor;
use crate::transcript::{first_difference, normalized_lines, recorded_calls, Event, EventBody, TranscriptLog};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("transcript has no user input with a config echo")]
    NoConfig,
    #[error("config echo: {0}")]
    BadConfig(String),
    #[error("session: {0}")]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    /// Index of the first event whose normalized form differs.
    pub diverged_at: Option<usize>,
    pub expected: Option<String>,
    pub actual: Option<String>,
    pub recorded_events: usize,
    pub replayed_events: usize,
    /// Recorded model calls left unconsumed.
    pub unused_calls: usize,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.diverged_at.is_none() && self.unused_calls == 0
    }
}

/// The echoed configuration of a recorded session.
pub fn echoed_config(events: &[Event]) -> Result<&Value, ReplayError> {
    events
        .iter()
        .find_map(|e| match &e.body {
            EventBody::UserInput(u) => u.config.as_ref(),
            _ => None,
        })
        .ok_or(ReplayError::NoConfig)
}

/// Session config, tools, prices and backend echo taken from a transcript.
pub fn config_from_echo(
    echo: &Value,
    workdir: &Path,
) -> Result<(SessionConfig, Vec<ToolDescriptor>, PriceTable, Value), ReplayError> {
    let bad = |e: serde_json::Error| ReplayError::BadConfig(e.to_string());
    let mut config: SessionConfig = serde_json::from_value(echo.clone()).map_err(bad)?;
    config.workdir = workdir.to_path_buf();
    let tools = match echo.get("tools") {
        Some(v) => serde_json::from_value(v.clone()).map_err(bad)?,
        None => Vec::new(),
    };
    let prices = match echo.get("prices") {
        Some(v) => serde_json::from_value(v.clone()).map_err(bad)?,
        None => PriceTable::new(),
    };
    let extra = match echo.get("backend") {
        Some(b) => serde_json::json!({ "backend": b }),
        None => Value::Object(Default::default()),
    };
    Ok((config, tools, prices, extra))
}

/// Re-runs every instruction of `recorded` against its recorded model
/// replies on `kernel`, whose workdir should be a scratch copy of the inputs.
pub async fn replay_transcript(
    recorded: &[Event],
    prompts: PromptCatalog,
    kernel: Arc<dyn Kernel>,
    scratch: &Path,
) -> Result<(ReplayReport, Vec<Event>), ReplayError> {
    let echo = echoed_config(recorded)?;
    let (config, tools, prices, echo_extra) = config_from_echo(echo, scratch)?;
    let provider = Arc::new(ReplayProvider::new(recorded_calls(recorded)));
    let llm: Arc<dyn LlmProvider> = provider.clone();
    let deps = Deps {
        llm,
        kernel,
        prompts: Arc::new(prompts),
        prices,
        tools,
        echo_extra,
    };
    let log = TranscriptLog::in_memory();
    let mut session = Session::start(config, deps, log.clone()).await?;
    for e in recorded {
        if let EventBody::UserInput(u) = &e.body {
            if let Err(err) = session.run_instruction(&u.text).await {
                tracing::warn!(error = %err, "replayed instruction rejected");
                break;
            }
        }
    }
    let replayed = log.snapshot();
    let diverged_at = first_difference(recorded, &replayed);
    let (expected, actual) = match diverged_at {
        Some(i) => (
            normalized_lines(recorded).get(i).cloned(),
            normalized_lines(&replayed).get(i).cloned(),
        ),
        None => (None, None),
    };
    Ok((
        ReplayReport {
            diverged_at,
            expected,
            actual,
            recorded_events: recorded.len(),
            replayed_events: replayed.len(),
            unused_calls: provider.remaining(),
        },
        replayed,
    ))
}
