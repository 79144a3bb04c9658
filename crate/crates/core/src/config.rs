//! TOML configuration: store location, pipeline tunables, generation
//! settings, server options and the backend registry.
//!
//! ```toml
//! [store]
//! dir = "data"
//!
//! [roles]
//! chat = "reasoner"
//! vision = "vlm"
//! text_embed = "embed"
//! image_embed = "face"
//!
//! [[backends]]
//! id = "reasoner"
//! kind = "chat"
//! url = "http://localhost:11434/v1"
//! model = "deepseek-r1:70b"
//! auth_env = "REASONER_API_KEY"
//! timeout_ms = 60000
//!
//! [[backends]]
//! id = "vlm"
//! kind = "vision_chat"
//! script = "mocks/vlm.json"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.
//! Secrets never appear here; `auth_env` names the variable that holds them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use crate::domain::{Decoding, GenerationConfig, DEFAULT_DECLARED_TEMPERATURE, DEFAULT_MAX_TOKENS};
use crate::encoder::DEFAULT_MATCH_THRESHOLD;
use crate::gateway::{
    BackendDescriptor, BackendKind, Backends, HttpBackend, MockBackend, MockScript, RetryPolicy,
    DEFAULT_MAX_IMAGE_BYTES, DEFAULT_MOCK_DIM,
};
use crate::memory::{default_preamble, DEFAULT_RETRIEVAL_K};
use crate::orchestrator::PipelineSettings;
use crate::persistence::StoreOptions;
use crate::profile_init::DEFAULT_COLD_START_QUERY;
use crate::trace::{TraceSyntax, PROFILE_UPDATE_PREFIX, THINK_CLOSE, THINK_OPEN};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreSection {
    pub dir: PathBuf,
    #[serde(default = "yes")]
    pub fsync: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub retrieval_k: usize,
    pub match_threshold: f64,
    pub cold_start_query: String,
    /// Replaces the built-in system preamble.
    pub preamble: Option<String>,
    pub think_open: String,
    pub think_close: String,
    pub directive: String,
    pub max_image_bytes: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            retrieval_k: DEFAULT_RETRIEVAL_K,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            cold_start_query: DEFAULT_COLD_START_QUERY.into(),
            preamble: None,
            think_open: THINK_OPEN.into(),
            think_close: THINK_CLOSE.into(),
            directive: PROFILE_UPDATE_PREFIX.into(),
            max_image_bytes: DEFAULT_MAX_IMAGE_BYTES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodingMode {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    pub decoding: DecodingMode,
    /// Sampling temperature; only used with `decoding = "sampled"`.
    pub temperature: Option<f64>,
    pub declared_temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            decoding: DecodingMode::Greedy,
            temperature: None,
            declared_temperature: DEFAULT_DECLARED_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolesSection {
    pub chat: String,
    pub vision: String,
    pub text_embed: String,
    pub image_embed: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub listen: String,
    /// Allowed browser origin; `"*"` allows any.
    pub cors_origin: Option<String>,
    /// Environment variable holding an optional static bearer token.
    pub auth_token_env: Option<String>,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self { listen: DEFAULT_LISTEN.into(), cors_origin: None, auth_token_env: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrySection {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetrySection {
    fn default() -> Self {
        let p = RetryPolicy::default();
        Self { max_retries: p.max_retries, base_delay_ms: p.base_delay.as_millis() as u64 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub store: StoreSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub generation: GenerationSection,
    pub roles: RolesSection,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub retry: RetrySection,
    pub backends: Vec<BackendDescriptor>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.to_path_buf(), message },
            other => other,
        })
    }

    /// Parses TOML text, resolving relative paths against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: Config =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: PathBuf::new(), message: e.to_string() })?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
        config.store.dir = resolve(&config.store.dir);
        for b in &mut config.backends {
            if let Some(s) = &b.script {
                b.script = Some(resolve(s));
            }
        }
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let mut seen = HashMap::new();
        for b in &self.backends {
            b.validate().map_err(ConfigError::Invalid)?;
            if seen.insert(b.backend_id.as_str(), b).is_some() {
                return Err(ConfigError::Invalid(format!("duplicate backend id {}", b.backend_id)));
            }
        }
        let roles = [
            ("chat", &self.roles.chat, &[BackendKind::Chat, BackendKind::VisionChat][..]),
            ("vision", &self.roles.vision, &[BackendKind::VisionChat][..]),
            ("text_embed", &self.roles.text_embed, &[BackendKind::TextEmbed][..]),
            ("image_embed", &self.roles.image_embed, &[BackendKind::ImageEmbed][..]),
        ];
        for (role, id, kinds) in roles {
            let b = seen
                .get(id.as_str())
                .ok_or_else(|| ConfigError::Invalid(format!("role {role} names unknown backend {id}")))?;
            if !kinds.contains(&b.kind) {
                return Err(ConfigError::Invalid(format!("role {role} cannot use backend {id} of kind {:?}", b.kind)));
            }
        }
        let p = &self.pipeline;
        if !(-1.0..=1.0).contains(&p.match_threshold) {
            return Err(ConfigError::Invalid("match_threshold must lie in [-1, 1]".into()));
        }
        if p.think_open.is_empty()
            || p.think_close.is_empty()
            || p.directive.is_empty()
            || p.think_open == p.think_close
        {
            return Err(ConfigError::Invalid("trace delimiters must be non-empty and distinct".into()));
        }
        if p.cold_start_query.trim().is_empty() {
            return Err(ConfigError::Invalid("cold_start_query is empty".into()));
        }
        if !self.generation_config()?.is_valid() {
            return Err(ConfigError::Invalid(
                "generation settings: max_tokens must be >= 1 and temperature > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn generation_config(&self) -> Result<GenerationConfig, ConfigError> {
        let g = &self.generation;
        let decoding = match (g.decoding, g.temperature) {
            (DecodingMode::Greedy, _) => Decoding::Greedy,
            (DecodingMode::Sampled, Some(t)) => Decoding::Sampled { temperature: t },
            (DecodingMode::Sampled, None) => {
                return Err(ConfigError::Invalid("sampled decoding needs a temperature".into()))
            }
        };
        Ok(GenerationConfig { decoding, declared_temperature: g.declared_temperature, max_tokens: g.max_tokens })
    }

    pub fn trace_syntax(&self) -> TraceSyntax {
        TraceSyntax {
            open: self.pipeline.think_open.clone(),
            close: self.pipeline.think_close.clone(),
            directive: self.pipeline.directive.clone(),
        }
    }

    pub fn pipeline_settings(&self) -> Result<PipelineSettings, ConfigError> {
        let syntax = self.trace_syntax();
        Ok(PipelineSettings {
            retrieval_k: self.pipeline.retrieval_k,
            match_threshold: self.pipeline.match_threshold,
            cold_start_query: self.pipeline.cold_start_query.clone(),
            preamble: self.pipeline.preamble.clone().unwrap_or_else(|| default_preamble(&syntax)),
            syntax,
            generation: self.generation_config()?,
            max_image_bytes: self.pipeline.max_image_bytes,
        })
    }

    pub fn store_options(&self) -> StoreOptions {
        StoreOptions { fsync: self.store.fsync }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { max_retries: self.retry.max_retries, base_delay: Duration::from_millis(self.retry.base_delay_ms) }
    }

    pub fn backend(&self, id: &str) -> Option<&BackendDescriptor> {
        self.backends.iter().find(|b| b.backend_id == id)
    }

    /// Instantiates the backends named by the roles. A backend used in
    /// several roles is built once and shared.
    pub fn build_backends(&self) -> Result<Backends, ConfigError> {
        let mut built: HashMap<&str, Built> = HashMap::new();
        for id in [&self.roles.chat, &self.roles.vision, &self.roles.text_embed, &self.roles.image_embed] {
            if built.contains_key(id.as_str()) {
                continue;
            }
            let d = self.backend(id).ok_or_else(|| ConfigError::Invalid(format!("unknown backend {id}")))?;
            built.insert(id.as_str(), build_one(d, self.retry_policy())?);
        }
        let get = |id: &String| built[id.as_str()].clone();
        Ok(Backends {
            chat: get(&self.roles.chat).chat(),
            vision: get(&self.roles.vision).vision(),
            text_embed: get(&self.roles.text_embed).text_embed(),
            image_embed: get(&self.roles.image_embed).image_embed(),
        })
    }
}

#[derive(Clone)]
enum Built {
    Mock(Arc<MockBackend>),
    Http(Arc<HttpBackend>),
}

impl Built {
    fn chat(self) -> Arc<dyn crate::gateway::ChatBackend> {
        match self {
            Built::Mock(b) => b,
            Built::Http(b) => b,
        }
    }

    fn vision(self) -> Arc<dyn crate::gateway::VisionBackend> {
        match self {
            Built::Mock(b) => b,
            Built::Http(b) => b,
        }
    }

    fn text_embed(self) -> Arc<dyn crate::gateway::TextEmbedder> {
        match self {
            Built::Mock(b) => b,
            Built::Http(b) => b,
        }
    }

    fn image_embed(self) -> Arc<dyn crate::gateway::ImageEmbedder> {
        match self {
            Built::Mock(b) => b,
            Built::Http(b) => b,
        }
    }
}

fn build_one(d: &BackendDescriptor, retry: RetryPolicy) -> Result<Built, ConfigError> {
    if d.is_mock() {
        let script = match &d.script {
            Some(path) => MockScript::load(path).map_err(ConfigError::Invalid)?,
            None => MockScript::default(),
        };
        let mock = MockBackend::new(d.backend_id.clone(), script).with_dim(d.dim.unwrap_or(DEFAULT_MOCK_DIM));
        Ok(Built::Mock(Arc::new(mock)))
    } else {
        let http = HttpBackend::new(d, retry).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Built::Http(Arc::new(http)))
    }
}
