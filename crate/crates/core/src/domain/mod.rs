//! Shared domain types. No I/O lives here.
//!
//! Every type serializes to line-oriented JSON; field names are part of the
//! persistence and HTTP contracts.

mod conversation;
mod embedding;
mod profile;
mod reasoning;

use serde::{Deserialize, Serialize};

pub use conversation::{session_user_id, ConversationTurn, Role, Session, TurnRef};
pub use embedding::{EmbeddingVector, EncoderSpec};
pub use profile::{
    provenance_monotone, AgeRange, Attribute, ProfileFields, ProfileInvariant, Provenance, Trait, UserProfile,
    MAX_AGE_YEARS, POSTERIOR_CONFIDENCE, PRIOR_CONFIDENCE,
};
pub use reasoning::{PromptContext, ReasoningTrace};

/// Precision, recall and F1 of one metric on one candidate/reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    /// Builds a score from precision and recall, with F1 as their harmonic mean
    /// (0 when both are 0).
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1 }
    }

    pub const ZERO: RougeScore = RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 };
}

/// One benchmark triplet plus the profile sentence for its image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchItem {
    pub item_id: String,
    pub image_ref: String,
    pub profile_text: String,
    pub question: String,
    pub reference_answer: String,
}

impl BenchItem {
    pub fn is_valid(&self) -> bool {
        !self.question.trim().is_empty() && !self.reference_answer.trim().is_empty()
    }
}

/// How tokens are chosen by the reasoning backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Sampled { temperature: f64 },
}

/// Default token budget for generation.
pub const DEFAULT_MAX_TOKENS: u32 = 512;
/// Temperature recorded on the wire alongside greedy decoding.
pub const DEFAULT_DECLARED_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub decoding: Decoding,
    pub declared_temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            decoding: Decoding::Greedy,
            declared_temperature: DEFAULT_DECLARED_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl GenerationConfig {
    pub fn is_valid(&self) -> bool {
        let decoding_ok = match self.decoding {
            Decoding::Greedy => true,
            Decoding::Sampled { temperature } => temperature > 0.0 && temperature.is_finite(),
        };
        decoding_ok && self.max_tokens >= 1
    }

    /// Temperature field sent on the wire.
    pub fn wire_temperature(&self) -> f64 {
        match self.decoding {
            Decoding::Greedy => self.declared_temperature,
            Decoding::Sampled { temperature } => temperature,
        }
    }
}
