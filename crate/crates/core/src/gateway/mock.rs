//! Deterministic scripted backend.
//!
//! Script files are a flat JSON object mapping request digests (hex SHA-256,
//! see [`chat_request_digest`] and [`vision_request_digest`]) to response
//! text. The optional key `"default"` answers any request without an entry.
//! Embeddings are pseudo-random unit vectors seeded by the SHA-256 of the
//! input, so identical input always yields the identical vector.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    chat_request_digest, validate_messages, vision_request_digest, Backend, ChatBackend, ChatMessage, GatewayError,
    ImageData, ImageEmbedder, TextEmbedder, VisionBackend,
};
use crate::domain::{EmbeddingVector, GenerationConfig};

pub const DEFAULT_MOCK_DIM: usize = 64;
const DEFAULT_KEY: &str = "default";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockScript {
    pub entries: BTreeMap<String, String>,
    pub default: Option<String>,
}

impl MockScript {
    pub fn with_default(text: impl Into<String>) -> Self {
        Self { entries: BTreeMap::new(), default: Some(text.into()) }
    }

    pub fn insert(&mut self, digest: impl Into<String>, response: impl Into<String>) {
        self.entries.insert(digest.into(), response.into());
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut entries: BTreeMap<String, String> = serde_json::from_str(text)?;
        let default = entries.remove(DEFAULT_KEY);
        Ok(Self { entries, default })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self) -> String {
        let mut all = self.entries.clone();
        if let Some(d) = &self.default {
            all.insert(DEFAULT_KEY.into(), d.clone());
        }
        serde_json::to_string_pretty(&all).expect("string map serializes")
    }

    pub fn lookup(&self, digest: &str) -> Option<&str> {
        self.entries.get(digest).or(self.default.as_ref()).map(String::as_str)
    }
}

/// Unit vector of dimension `dim` derived from `input` alone.
pub fn hash_embedding(input: &[u8], dim: usize) -> EmbeddingVector {
    let seed: [u8; 32] = Sha256::digest(input).into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    EmbeddingVector(raw.into_iter().map(|x| x / norm).collect())
}

/// Scripted backend usable in every role. Counts calls per capability.
#[derive(Debug)]
pub struct MockBackend {
    id: String,
    script: MockScript,
    dim: usize,
    reachable: AtomicBool,
    chat_calls: AtomicUsize,
    vision_calls: AtomicUsize,
    embed_calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(id: impl Into<String>, script: MockScript) -> Self {
        Self {
            id: id.into(),
            script,
            dim: DEFAULT_MOCK_DIM,
            reachable: AtomicBool::new(true),
            chat_calls: AtomicUsize::new(0),
            vision_calls: AtomicUsize::new(0),
            embed_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim.max(1);
        self
    }

    /// Simulates an outage: every call fails with `BackendUnavailable`.
    pub fn set_reachable(&self, reachable: bool) {
        self.reachable.store(reachable, Ordering::SeqCst);
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn vision_calls(&self) -> usize {
        self.vision_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }

    fn check_up(&self) -> Result<(), GatewayError> {
        if self.reachable.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(GatewayError::BackendUnavailable { backend: self.id.clone(), reason: "mock marked down".into() })
        }
    }

    fn answer(&self, digest: &str) -> Result<String, GatewayError> {
        self.script.lookup(digest).map(str::to_string).ok_or_else(|| GatewayError::BackendUnavailable {
            backend: self.id.clone(),
            reason: format!("no script entry for digest {digest}"),
        })
    }
}

impl Backend for MockBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn ping(&self) -> bool {
        self.reachable.load(Ordering::SeqCst)
    }
}

impl ChatBackend for MockBackend {
    fn chat_complete(&self, messages: &[ChatMessage], _config: &GenerationConfig) -> Result<String, GatewayError> {
        validate_messages(messages)?;
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        self.check_up()?;
        self.answer(&chat_request_digest(messages))
    }
}

impl VisionBackend for MockBackend {
    fn vision_complete(
        &self,
        image: &ImageData,
        prompt: &str,
        _config: &GenerationConfig,
    ) -> Result<String, GatewayError> {
        self.vision_calls.fetch_add(1, Ordering::SeqCst);
        self.check_up()?;
        self.answer(&vision_request_digest(&image.sha256, prompt))
    }
}

impl TextEmbedder for MockBackend {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::InvalidRequest("cannot embed empty text".into()));
        }
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        self.check_up()?;
        Ok(hash_embedding(text.as_bytes(), self.dim))
    }
}

impl ImageEmbedder for MockBackend {
    fn embed_image(&self, image: &ImageData) -> Result<EmbeddingVector, GatewayError> {
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        self.check_up()?;
        Ok(hash_embedding(&image.bytes, self.dim))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_embedding_is_deterministic_unit() {
        let m = MockBackend::new("m", MockScript::default());
        let a = m.embed_text("hello").unwrap();
        assert_eq!(a, m.embed_text("hello").unwrap());
        let b = m.embed_text("world").unwrap();
        assert_ne!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12 && (b.norm() - 1.0).abs() < 1e-12);
        assert_eq!(a.dim(), DEFAULT_MOCK_DIM);
        assert!(matches!(m.embed_text(""), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn hash_embedding_matches_independent_seeding() {
        // same generator driven by hand
        let seed: [u8; 32] = Sha256::digest(b"hello").into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected: Vec<f64> = raw.iter().map(|x| x / n).collect();
        assert_eq!(hash_embedding(b"hello", 8).0, expected);
    }

    #[test]
    fn chat_uses_digest_then_default() {
        let msgs = vec![ChatMessage::user("q")];
        let mut script = MockScript::default();
        script.insert(chat_request_digest(&msgs), "scripted");
        let m = MockBackend::new("m", script.clone());
        let cfg = GenerationConfig::default();
        assert_eq!(m.chat_complete(&msgs, &cfg).unwrap(), "scripted");
        assert!(m.chat_complete(&[ChatMessage::user("other")], &cfg).is_err());
        script.default = Some("fallback".into());
        let m = MockBackend::new("m", script);
        assert_eq!(m.chat_complete(&[ChatMessage::user("other")], &cfg).unwrap(), "fallback");
        assert_eq!(m.chat_calls(), 1);
    }

    #[test]
    fn script_json_round_trip() {
        let mut s = MockScript::with_default("d");
        s.insert("abc", "x");
        assert_eq!(MockScript::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn down_mock_fails() {
        let m = MockBackend::new("m", MockScript::with_default("x"));
        m.set_reachable(false);
        assert!(!m.ping());
        assert!(matches!(
            m.chat_complete(&[ChatMessage::user("q")], &GenerationConfig::default()),
            Err(GatewayError::BackendUnavailable { .. })
        ));
    }
}
