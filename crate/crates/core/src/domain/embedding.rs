use serde::{Deserialize, Serialize};

/// Dense real vector used for identity and text retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|v| v * alpha).collect())
    }

    /// Rounds every entry to 9 significant decimal digits, the precision the
    /// vector stores persist. Values survive a text round trip unchanged after this.
    pub fn quantized(&self) -> Self {
        Self(self.0.iter().map(|v| format!("{v:.8e}").parse::<f64>().unwrap_or(*v)).collect())
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Dimensions of the external vision encoder and its projection head.
///
/// The encoder maps `n_tokens` image tokens of width `image_token_dim` to
/// hidden states of width `hidden_dim`; the projection head maps the cls
/// hidden state to an `embedding_dim` vector. Both run in the backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub image_token_dim: usize,
    pub n_tokens: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub backend_id: String,
}

impl EncoderSpec {
    pub fn is_valid(&self) -> bool {
        self.image_token_dim >= 1 && self.n_tokens >= 1 && self.hidden_dim >= 1 && self.embedding_dim >= 1
    }
}
