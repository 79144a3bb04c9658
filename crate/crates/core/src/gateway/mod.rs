//! Uniform access to external model backends.
//!
//! Four capabilities: chat completion, vision+text completion, text
//! embedding and image embedding. [`HttpBackend`] speaks the common
//! chat-completions JSON protocol; [`MockBackend`] answers from a script
//! keyed by request digest and never touches the network.

mod http;
mod mock;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{EmbeddingVector, GenerationConfig};

pub use http::{HttpBackend, RetryPolicy};
pub use mock::{hash_embedding, MockBackend, MockScript, DEFAULT_MOCK_DIM};

/// Largest image accepted for inline transmission.
pub const DEFAULT_MAX_IMAGE_BYTES: usize = 8 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("backend {backend} unavailable: {reason}")]
    BackendUnavailable { backend: String, reason: String },
    #[error("backend {backend} returned a malformed response: {reason}")]
    MalformedResponse { backend: String, reason: String },
    #[error("backend {backend} timed out")]
    Timeout { backend: String },
    #[error("image {path} unreadable: {reason}")]
    ImageUnreadable { path: String, reason: String },
    #[error("image {path} is {size} bytes, limit is {limit}")]
    ImageTooLarge { path: String, size: usize, limit: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("backend {backend} does not support {operation}")]
    Unsupported { backend: String, operation: &'static str },
}

impl GatewayError {
    /// True for errors caused by the backend rather than the request.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            GatewayError::BackendUnavailable { .. }
                | GatewayError::MalformedResponse { .. }
                | GatewayError::Timeout { .. }
                | GatewayError::Unsupported { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: ChatRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: ChatRole::User, content: content.into() }
    }
}

/// Checks chat preconditions: non-empty, last message from the user.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), GatewayError> {
    match messages.last() {
        None => Err(GatewayError::InvalidRequest("no messages".into())),
        Some(m) if m.role != ChatRole::User => {
            Err(GatewayError::InvalidRequest("last message must have role user".into()))
        }
        Some(_) => Ok(()),
    }
}

/// Image bytes loaded for transmission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    /// Path or URI the bytes came from.
    pub reference: String,
    pub bytes: Vec<u8>,
    pub mime: &'static str,
    /// Hex SHA-256 of `bytes`.
    pub sha256: String,
}

impl ImageData {
    /// Wraps in-memory bytes, checking size and format.
    pub fn from_bytes(reference: impl Into<String>, bytes: Vec<u8>, max_bytes: usize) -> Result<Self, GatewayError> {
        let reference = reference.into();
        if bytes.len() > max_bytes {
            return Err(GatewayError::ImageTooLarge { path: reference, size: bytes.len(), limit: max_bytes });
        }
        let mime = sniff_image_mime(&bytes).ok_or_else(|| GatewayError::ImageUnreadable {
            path: reference.clone(),
            reason: "not a recognized image format".into(),
        })?;
        let sha256 = sha256_hex(&bytes);
        Ok(Self { reference, bytes, mime, sha256 })
    }

    /// Reads an image file. The size limit is checked from metadata before reading.
    pub fn load(path: &Path, max_bytes: usize) -> Result<Self, GatewayError> {
        let reference = path.display().to_string();
        let unreadable =
            |e: std::io::Error| GatewayError::ImageUnreadable { path: reference.clone(), reason: e.to_string() };
        let meta = std::fs::metadata(path).map_err(unreadable)?;
        if meta.len() as usize > max_bytes {
            return Err(GatewayError::ImageTooLarge { path: reference, size: meta.len() as usize, limit: max_bytes });
        }
        let bytes = std::fs::read(path).map_err(unreadable)?;
        Self::from_bytes(reference, bytes, max_bytes)
    }

    pub fn data_url(&self) -> String {
        use base64::Engine;
        format!("data:{};base64,{}", self.mime, base64::engine::general_purpose::STANDARD.encode(&self.bytes))
    }
}

/// MIME type from the file signature, for the formats vision backends accept.
fn sniff_image_mime(bytes: &[u8]) -> Option<&'static str> {
    const SIGNATURES: &[(&[u8], &str)] = &[
        (b"\x89PNG\r\n\x1a\n", "image/png"),
        (b"\xff\xd8\xff", "image/jpeg"),
        (b"GIF87a", "image/gif"),
        (b"GIF89a", "image/gif"),
        (b"BM", "image/bmp"),
    ];
    if bytes.len() >= 12 && &bytes[..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
        return Some("image/webp");
    }
    SIGNATURES.iter().find(|(sig, _)| bytes.starts_with(sig)).map(|(_, mime)| *mime)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a chat request: SHA-256 of the JSON-encoded message list.
pub fn chat_request_digest(messages: &[ChatMessage]) -> String {
    let canonical = serde_json::to_string(messages).expect("messages serialize");
    sha256_hex(canonical.as_bytes())
}

/// Digest of a vision request: SHA-256 of `{"image_sha256":..,"prompt_sha256":..}`.
pub fn vision_request_digest(image_sha256: &str, prompt: &str) -> String {
    let canonical = serde_json::json!({
        "image_sha256": image_sha256,
        "prompt_sha256": sha256_hex(prompt.as_bytes()),
    });
    sha256_hex(canonical.to_string().as_bytes())
}

/// Identity and liveness common to every backend.
pub trait Backend: Send + Sync {
    fn backend_id(&self) -> &str;
    /// Bounded-time reachability probe.
    fn ping(&self) -> bool;
}

pub trait ChatBackend: Backend {
    fn chat_complete(&self, messages: &[ChatMessage], config: &GenerationConfig) -> Result<String, GatewayError>;
}

pub trait VisionBackend: Backend {
    fn vision_complete(
        &self,
        image: &ImageData,
        prompt: &str,
        config: &GenerationConfig,
    ) -> Result<String, GatewayError>;
}

pub trait TextEmbedder: Backend {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError>;
}

pub trait ImageEmbedder: Backend {
    fn embed_image(&self, image: &ImageData) -> Result<EmbeddingVector, GatewayError>;
}

/// Loads `path` and forwards to the backend.
pub fn vision_complete_path(
    backend: &dyn VisionBackend,
    path: &Path,
    prompt: &str,
    config: &GenerationConfig,
    max_bytes: usize,
) -> Result<String, GatewayError> {
    let image = ImageData::load(path, max_bytes)?;
    backend.vision_complete(&image, prompt, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Chat,
    TextEmbed,
    ImageEmbed,
    VisionChat,
}

/// Registry entry for one backend.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    #[serde(rename = "id")]
    pub backend_id: String,
    pub kind: BackendKind,
    #[serde(rename = "url", default)]
    pub endpoint_url: Option<String>,
    #[serde(rename = "model", default)]
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    #[serde(rename = "auth_env", default)]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Mock script path; selects the mock implementation.
    #[serde(default)]
    pub script: Option<PathBuf>,
    /// Output dimension for mock embedders.
    #[serde(default)]
    pub dim: Option<usize>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl std::fmt::Debug for BackendDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // only the variable name is ever shown, never its value
        f.debug_struct("BackendDescriptor")
            .field("backend_id", &self.backend_id)
            .field("kind", &self.kind)
            .field("endpoint_url", &self.endpoint_url)
            .field("model_name", &self.model_name)
            .field("auth_env_var", &self.auth_env_var)
            .field("timeout_ms", &self.timeout_ms)
            .field("script", &self.script)
            .finish()
    }
}

impl BackendDescriptor {
    pub fn is_mock(&self) -> bool {
        self.endpoint_url.is_none()
    }

    /// HTTP backends need a URL; mocks need a script, except embedders which
    /// may instead give just a dimension.
    pub fn validate(&self) -> Result<(), String> {
        if self.backend_id.is_empty() {
            return Err("backend id is empty".into());
        }
        match (&self.endpoint_url, &self.script) {
            (Some(_), Some(_)) => Err(format!("backend {}: set either url or script, not both", self.backend_id)),
            (Some(url), None) if url.trim().is_empty() => Err(format!("backend {}: empty url", self.backend_id)),
            (Some(_), None) => Ok(()),
            (None, Some(_)) => Ok(()),
            (None, None) => match self.kind {
                BackendKind::TextEmbed | BackendKind::ImageEmbed if self.dim.is_some() => Ok(()),
                _ => Err(format!("backend {}: mock backends require a script path", self.backend_id)),
            },
        }
    }
}

/// The four backends a pipeline needs.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub vision: Arc<dyn VisionBackend>,
    pub text_embed: Arc<dyn TextEmbedder>,
    pub image_embed: Arc<dyn ImageEmbedder>,
}

impl Backends {
    /// Uses one backend for all four roles.
    pub fn uniform<B>(backend: Arc<B>) -> Self
    where
        B: ChatBackend + VisionBackend + TextEmbedder + ImageEmbedder + 'static,
    {
        Self { chat: backend.clone(), vision: backend.clone(), text_embed: backend.clone(), image_embed: backend }
    }

    /// Reachability of each distinct backend id, sorted by id.
    pub fn health(&self) -> Vec<(String, bool)> {
        let probes: [&dyn Backend; 4] = [
            &*self.chat as &dyn Backend,
            &*self.vision as &dyn Backend,
            &*self.text_embed as &dyn Backend,
            &*self.image_embed as &dyn Backend,
        ];
        let mut out: Vec<(String, bool)> = Vec::new();
        for b in probes {
            if out.iter().any(|(id, _)| id == b.backend_id()) {
                continue;
            }
            out.push((b.backend_id().to_string(), b.ping()));
        }
        out.sort();
        out
    }
}
