//! TOML configuration file and command-line overrides.
//!
//! Secrets never live in the file: the model API key and the gateway token
//! are read from the environment variables the file names.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::executor::BackendConfig;
use crate::fst::Budgets;
use crate::llm::{HttpProvider, HttpProviderConfig, LlmProvider, PriceTable, RateLimited, ScriptedProvider};
use crate::orchestrator::{Ablations, SessionConfig};
use crate::prompts::PromptCatalog;
use crate::toolkit::{load_registry, visual_tool_descriptor, ToolDescriptor, DEFAULT_GLOBAL_CNT, DEFAULT_JUDGE_MODEL};

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_GATEWAY_TOKEN_ENV: &str = "CELLWISE_GATEWAY_TOKEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("environment variable {0} is not set")]
    MissingSecret(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Any OpenAI-compatible chat completion endpoint.
    #[default]
    Openai,
    /// Replies read from a JSON list of strings, for offline runs.
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLimit {
    pub capacity: u32,
    pub refill_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub provider: ProviderKind,
    pub name: String,
    pub temperature: f64,
    #[serde(flatten)]
    pub http: HttpProviderConfig,
    pub api_key_env: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_limit: Option<RateLimit>,
    /// Reply file for the scripted provider.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Openai,
            name: "gpt-4o".into(),
            temperature: 0.0,
            http: HttpProviderConfig::default(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            rate_limit: None,
            script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionSection {
    pub task_timeout_secs: f64,
    pub action_timeout_secs: f64,
    pub retry_on_parse_error: u32,
    pub max_revalidations: u32,
    pub code_tag: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
}

impl Default for SessionSection {
    fn default() -> Self {
        let d = SessionConfig::default();
        Self {
            task_timeout_secs: d.task_timeout_secs,
            action_timeout_secs: d.action_timeout_secs,
            retry_on_parse_error: d.retry_on_parse_error,
            max_revalidations: d.max_revalidations,
            code_tag: d.code_tag,
            prompts_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolsSection {
    /// JSON list of tool descriptors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub registry: Option<PathBuf>,
    pub visual: bool,
    pub judge_model: String,
    pub visual_budget: u32,
}

impl Default for ToolsSection {
    fn default() -> Self {
        Self {
            registry: None,
            visual: false,
            judge_model: DEFAULT_JUDGE_MODEL.into(),
            visual_budget: DEFAULT_GLOBAL_CNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSection {
    pub token_env: String,
    /// Parent directory for per-session workdirs.
    pub sessions_dir: PathBuf,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            token_env: "CELLWISE_API_TOKEN".into(),
            sessions_dir: PathBuf::from("cellwise-sessions"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub model: ModelSection,
    pub budgets: Budgets,
    pub executor: ExecutorSection,
    pub session: SessionSection,
    pub ablations: Ablations,
    pub prices: PriceTable,
    pub tools: ToolsSection,
    pub service: ServiceSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorSection {
    #[serde(flatten)]
    pub backend: BackendConfig,
    pub token_env: String,
}

impl Default for ExecutorSection {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            token_env: DEFAULT_GATEWAY_TOKEN_ENV.into(),
        }
    }
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_planning_number: Option<u32>,
    pub max_execution_number: Option<u32>,
    pub max_debug_number: Option<u32>,
    pub max_planning_execution_number: Option<u32>,
    pub backend: Option<String>,
    pub task_timeout_secs: Option<f64>,
    pub disable_planning: bool,
    pub disable_repair: bool,
    pub script: Option<PathBuf>,
}

impl FileConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Loads a file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        rebase(&mut config.model.script);
        rebase(&mut config.session.prompts_dir);
        rebase(&mut config.tools.registry);
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(m) = &o.model {
            self.model.name = m.clone();
        }
        if let Some(t) = o.temperature {
            self.model.temperature = t;
        }
        if let Some(n) = o.max_planning_number {
            self.budgets.max_planning_number = n;
        }
        if let Some(n) = o.max_execution_number {
            self.budgets.max_execution_number = n;
        }
        if let Some(n) = o.max_debug_number {
            self.budgets.max_debug_number = n;
        }
        if let Some(n) = o.max_planning_execution_number {
            self.budgets.max_planning_execution_number = Some(n);
        }
        if let Some(b) = &o.backend {
            self.executor.backend = match b.as_str() {
                "local" => BackendConfig::Local(Default::default()),
                "sim" => BackendConfig::Sim(Default::default()),
                "gateway" => match &self.executor.backend {
                    g @ BackendConfig::Gateway(_) => g.clone(),
                    _ => BackendConfig::Gateway(Default::default()),
                },
                other => return Err(ConfigError::Invalid(format!("unknown backend {other}"))),
            };
        }
        if let Some(t) = o.task_timeout_secs {
            self.session.task_timeout_secs = t;
        }
        self.ablations.disable_planning |= o.disable_planning;
        self.ablations.disable_repair |= o.disable_repair;
        if let Some(s) = &o.script {
            self.model.provider = ProviderKind::Scripted;
            self.model.script = Some(s.clone());
        }
        Ok(())
    }

    pub fn session_config(&self, workdir: &Path) -> SessionConfig {
        SessionConfig {
            model: self.model.name.clone(),
            temperature: self.model.temperature,
            budgets: self.budgets,
            code_tag: self.session.code_tag.clone(),
            workdir: workdir.to_path_buf(),
            ablations: self.ablations,
            task_timeout_secs: self.session.task_timeout_secs,
            action_timeout_secs: self.session.action_timeout_secs,
            retry_on_parse_error: self.session.retry_on_parse_error,
            max_revalidations: self.session.max_revalidations,
            truncation: Default::default(),
            judge_model: self.tools.judge_model.clone(),
            visual_budget: self.tools.visual_budget,
        }
    }

    /// The model provider, with its key taken from the environment.
    pub fn provider(&self) -> Result<Arc<dyn LlmProvider>, ConfigError> {
        let base: Arc<dyn LlmProvider> = match self.model.provider {
            ProviderKind::Scripted => {
                let path = self
                    .model
                    .script
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("scripted provider needs model.script".into()))?;
                Arc::new(ScriptedProvider::from_replies(read_script(path)?))
            }
            ProviderKind::Openai => {
                let mut http = self.model.http.clone();
                http.api_key = Some(
                    std::env::var(&self.model.api_key_env)
                        .map_err(|_| ConfigError::MissingSecret(self.model.api_key_env.clone()))?,
                );
                Arc::new(HttpProvider::new(http).map_err(|e| ConfigError::Invalid(e.to_string()))?)
            }
        };
        Ok(match self.model.rate_limit {
            Some(r) => Arc::new(RateLimited::new(base, r.capacity, r.refill_per_sec)),
            None => base,
        })
    }

    /// Backend settings with the gateway token filled from the environment.
    pub fn backend(&self) -> BackendConfig {
        let mut backend = self.executor.backend.clone();
        if let BackendConfig::Gateway(g) = &mut backend {
            if g.token.is_none() {
                g.token = std::env::var(&self.executor.token_env).ok();
            }
        }
        backend
    }

    pub fn prompts(&self) -> Result<PromptCatalog, ConfigError> {
        let catalog = match &self.session.prompts_dir {
            Some(dir) => PromptCatalog::load_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => PromptCatalog::builtin(),
        };
        catalog.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(catalog)
    }

    pub fn tools(&self) -> Result<Vec<ToolDescriptor>, ConfigError> {
        let mut tools = match &self.tools.registry {
            Some(p) => load_registry(p).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => Vec::new(),
        };
        if self.tools.visual && !tools.iter().any(|t| t.name == crate::toolkit::VISUAL_TOOL_NAME) {
            tools.push(visual_tool_descriptor(self.tools.visual_budget));
        }
        Ok(tools)
    }

    /// Backend description recorded in transcripts, without secrets.
    pub fn echo_extra(&self) -> Value {
        serde_json::json!({ "backend": self.executor.backend })
    }
}

/// Reply script: a JSON list of reply strings.
pub fn read_script(path: &Path) -> Result<Vec<String>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[model]
provider = "openai"
name = "gpt-4o-mini"
base_url = "http://localhost:9000"
api_key_env = "MY_KEY"

[budgets]
max_planning_number = 3

[executor]
backend = "gateway"
base_url = "http://kernel:8888"

[ablations]
disable_repair = true

[prices.gpt-4o-mini]
input_per_1k = "0.00015"
output_per_1k = "0.0006"
"#;

    #[test]
    fn parses_sections() {
        let c = FileConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(c.model.name, "gpt-4o-mini");
        assert_eq!(c.model.http.base_url, "http://localhost:9000");
        assert_eq!(c.model.http.path, "/v1/chat/completions");
        assert_eq!(c.budgets.max_planning_number, 3);
        assert_eq!(c.budgets.max_execution_number, 6);
        assert!(matches!(&c.executor.backend, BackendConfig::Gateway(g) if g.base_url == "http://kernel:8888"));
        assert!(c.ablations.disable_repair);
        assert!(c.prices.contains("gpt-4o-mini"));
    }

    #[test]
    fn empty_file_is_defaults() {
        let c = FileConfig::from_toml("").unwrap();
        assert_eq!(c, FileConfig::default());
        let s = c.session_config(Path::new("/w"));
        assert_eq!(s.task_timeout_secs, 3600.0);
        assert_eq!(s.temperature, 0.0);
    }

    #[test]
    fn overrides_win() {
        let mut c = FileConfig::from_toml(SAMPLE).unwrap();
        c.apply(&Overrides {
            model: Some("other".into()),
            max_planning_number: Some(9),
            backend: Some("sim".into()),
            disable_planning: true,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.model.name, "other");
        assert_eq!(c.budgets.max_planning_number, 9);
        assert!(matches!(c.executor.backend, BackendConfig::Sim(_)));
        assert!(c.ablations.disable_planning && c.ablations.disable_repair);
    }

    #[test]
    fn missing_key_is_reported() {
        let mut c = FileConfig::default();
        c.model.api_key_env = "CELLWISE_TEST_UNSET_KEY".into();
        assert!(matches!(c.provider(), Err(ConfigError::MissingSecret(_))));
    }

    #[test]
    fn echo_has_no_secrets() {
        let mut c = FileConfig::from_toml(SAMPLE).unwrap();
        if let BackendConfig::Gateway(g) = &mut c.executor.backend {
            g.token = Some("sekrit".into());
        }
        assert!(!c.echo_extra().to_string().contains("sekrit"));
    }
}
