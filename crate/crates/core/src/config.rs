//! Experiment configuration files and backend construction.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{
    self, ContextBudget, EndpointConfig, GenerationParams, LlmBackend, MockBackend, MockBehavior,
    OpenAiCompatible,
};
use crate::tasks::{RegistryError, TaskRegistry};

pub const API_KEY_VAR: &str = "TABLETOP_API_KEY";
pub const ENDPOINT_URL_VAR: &str = "TABLETOP_ENDPOINT_URL";

/// Window used by `mock:forgetful` without an explicit size.
pub const DEFAULT_FORGETFUL_WINDOW: usize = 6;

const OPENAI_URL: &str = "https://api.openai.com/v1";
const OPENAI_MODEL: &str = "gpt-3.5-turbo-0125";
const LOCAL_URL: &str = "http://127.0.0.1:11434/v1";
const LOCAL_MODEL: &str = "llama3:70b-instruct-q8_0";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config file {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Standalone,
    Consecutive,
    Intervened,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Standalone, Mode::Consecutive, Mode::Intervened];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Standalone => "standalone",
            Mode::Consecutive => "consecutive",
            Mode::Intervened => "intervened",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ConfigError::Invalid(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    #[default]
    Jaccard,
    Exact,
}

impl FromStr for Scoring {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "jaccard" => Ok(Scoring::Jaccard),
            "exact" => Ok(Scoring::Exact),
            _ => Err(ConfigError::Invalid(format!("unknown retention scoring `{s}`"))),
        }
    }
}

/// Which model answers. Written as `mock`, `mock:forgetful[:N]`,
/// `trace:<file>`, `openai` or `local`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Oracle,
    Forgetful(usize),
    Trace(PathBuf),
    OpenAi,
    Local,
}

impl BackendSpec {
    pub fn is_remote(&self) -> bool {
        matches!(self, BackendSpec::OpenAi | BackendSpec::Local)
    }

    pub fn default_endpoint(&self) -> Option<EndpointConfig> {
        match self {
            BackendSpec::OpenAi => Some(EndpointConfig::new(OPENAI_URL, OPENAI_MODEL)),
            BackendSpec::Local => Some(EndpointConfig::new(LOCAL_URL, LOCAL_MODEL)),
            _ => None,
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Oracle => f.write_str("mock"),
            BackendSpec::Forgetful(w) => write!(f, "mock:forgetful:{w}"),
            BackendSpec::Trace(path) => write!(f, "trace:{}", path.display()),
            BackendSpec::OpenAi => f.write_str("openai"),
            BackendSpec::Local => f.write_str("local"),
        }
    }
}

impl FromStr for BackendSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || ConfigError::Invalid(format!("unknown backend `{s}`"));
        let parts: Vec<&str> = s.trim().splitn(3, ':').collect();
        match parts.as_slice() {
            ["mock"] | ["mock", "oracle"] => Ok(BackendSpec::Oracle),
            ["mock", "forgetful"] => Ok(BackendSpec::Forgetful(DEFAULT_FORGETFUL_WINDOW)),
            ["mock", "forgetful", n] => match n.parse::<usize>() {
                Ok(w) if w > 0 => Ok(BackendSpec::Forgetful(w)),
                _ => Err(invalid()),
            },
            ["trace", rest @ ..] | ["mock", "trace", rest @ ..] if !rest.is_empty() => {
                Ok(BackendSpec::Trace(PathBuf::from(rest.join(":"))))
            }
            ["openai"] => Ok(BackendSpec::OpenAi),
            ["local"] => Ok(BackendSpec::Local),
            _ => Err(invalid()),
        }
    }
}

impl Serialize for BackendSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BackendSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub trials: usize,
    pub memory: bool,
    pub backend: BackendSpec,
    pub strict_single_action: bool,
    pub seed: u64,
    /// Worker threads for trial fan-out; 0 uses all cores.
    pub parallelism: usize,
    pub retention_scoring: Scoring,
    pub context_tokens: Option<usize>,
    pub fixtures_dir: Option<PathBuf>,
    pub params: GenerationParams,
    pub endpoint: Option<EndpointConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Standalone,
            trials: 50,
            memory: true,
            backend: BackendSpec::Oracle,
            strict_single_action: true,
            seed: 0,
            parallelism: 1,
            retention_scoring: Scoring::Jaccard,
            context_tokens: None,
            fixtures_dir: None,
            params: GenerationParams::default(),
            endpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// The config as written to `config.snapshot`; never contains the API key.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.trials == 0 {
            return Err(ConfigError::Invalid("trials must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.params.temperature) {
            return Err(ConfigError::Invalid("temperature must lie in [0, 2]".into()));
        }
        if !(0.0..=1.0).contains(&self.params.top_p) || self.params.top_p == 0.0 {
            return Err(ConfigError::Invalid("top_p must lie in (0, 1]".into()));
        }
        if self.context_tokens == Some(0) {
            return Err(ConfigError::Invalid("context_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn budget(&self) -> Option<ContextBudget> {
        self.context_tokens.map(ContextBudget::new)
    }

    pub fn registry(&self) -> Result<TaskRegistry, ConfigError> {
        Ok(match &self.fixtures_dir {
            Some(dir) => TaskRegistry::from_dir(dir)?,
            None => TaskRegistry::builtin(),
        })
    }

    /// Endpoint for remote backends with environment overrides applied.
    pub fn resolved_endpoint(&self) -> Option<EndpointConfig> {
        let mut endpoint = self
            .endpoint
            .clone()
            .or_else(|| self.backend.default_endpoint())?;
        if let Ok(url) = std::env::var(ENDPOINT_URL_VAR) {
            if !url.trim().is_empty() {
                endpoint.base_url = url.trim().to_string();
            }
        }
        endpoint.api_key = std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty());
        Some(endpoint)
    }
}

/// Builds fresh coordinator and worker backends for each trial.
pub trait BackendFactory: Sync {
    /// Model name recorded in reports.
    fn model_name(&self) -> String;
    fn coordinator(&self, trial: usize) -> Box<dyn LlmBackend>;
    fn worker(&self, trial: usize) -> Box<dyn LlmBackend>;
}

/// Factory built from a [`BackendSpec`]. Traced runs replay the coordinator
/// replies and use the oracle for worker prompts.
pub struct SpecFactory {
    spec: BackendSpec,
    registry: Arc<TaskRegistry>,
    endpoint: Option<EndpointConfig>,
    trace: Vec<String>,
}

impl SpecFactory {
    pub fn new(config: &ExperimentConfig, registry: Arc<TaskRegistry>) -> Result<Self, ConfigError> {
        let trace = match &config.backend {
            BackendSpec::Trace(path) => load_trace(path)?,
            _ => Vec::new(),
        };
        let endpoint = if config.backend.is_remote() {
            config.resolved_endpoint()
        } else {
            None
        };
        Ok(Self {
            spec: config.backend.clone(),
            registry,
            endpoint,
            trace,
        })
    }

    fn mock(&self, behavior: MockBehavior) -> Box<dyn LlmBackend> {
        Box::new(MockBackend::new(behavior, self.registry.clone()))
    }

    fn remote(&self) -> Box<dyn LlmBackend> {
        let endpoint = self.endpoint.clone().expect("remote backends resolve an endpoint");
        Box::new(OpenAiCompatible::new(endpoint))
    }
}

impl BackendFactory for SpecFactory {
    fn model_name(&self) -> String {
        match &self.endpoint {
            Some(endpoint) => endpoint.model.clone(),
            None => self.coordinator(0).name(),
        }
    }

    fn coordinator(&self, _trial: usize) -> Box<dyn LlmBackend> {
        match &self.spec {
            BackendSpec::Oracle => self.mock(MockBehavior::Oracle),
            BackendSpec::Forgetful(w) => self.mock(MockBehavior::Forgetful { window: *w }),
            BackendSpec::Trace(_) => self.mock(MockBehavior::Trace(self.trace.clone())),
            BackendSpec::OpenAi | BackendSpec::Local => self.remote(),
        }
    }

    fn worker(&self, _trial: usize) -> Box<dyn LlmBackend> {
        match &self.spec {
            BackendSpec::OpenAi | BackendSpec::Local => self.remote(),
            _ => self.mock(MockBehavior::Oracle),
        }
    }
}

/// Coordinator replies from a saved transcript (`### assistant` blocks) or a
/// JSON array of strings.
pub fn load_trace(path: &Path) -> Result<Vec<String>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trace(&text)
        .ok_or_else(|| ConfigError::Invalid(format!("{} holds no replies", path.display())))
}

pub fn parse_trace(text: &str) -> Option<Vec<String>> {
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).ok();
    }
    let replies: Vec<String> = llm::parse_transcript(text)
        .into_iter()
        .filter(|m| m.role == llm::Role::Assistant)
        .map(|m| m.content)
        .collect();
    (!replies.is_empty()).then_some(replies)
}
