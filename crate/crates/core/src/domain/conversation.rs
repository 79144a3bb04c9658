use serde::{Deserialize, Serialize};

use super::{EmbeddingVector, ReasoningTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Agent => "agent",
        }
    }
}

/// One persisted dialogue utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub turn_id: u64,
    pub session_id: String,
    pub role: Role,
    pub text: String,
    /// UTC milliseconds since the Unix epoch.
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
    /// Parsed reasoning for agent turns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<ReasoningTrace>,
}

impl ConversationTurn {
    pub fn is_embedded(&self) -> bool {
        self.embedding.is_some()
    }
}

/// Position of one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRef {
    pub session_id: String,
    pub turn_id: u64,
}

/// Dialogue container; `turns` is ordered by `turn_id` starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    /// Identity-resolved user, set once a face has been matched or enrolled.
    #[serde(default)]
    pub resolved_user: Option<String>,
    #[serde(default)]
    pub profile_revision_at_last_turn: u64,
    /// Session-scoped consent for facial image analysis.
    #[serde(default)]
    pub consent: bool,
    #[serde(default)]
    pub turns: Vec<ConversationTurn>,
}

impl Session {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            resolved_user: None,
            profile_revision_at_last_turn: 0,
            consent: false,
            turns: Vec::new(),
        }
    }

    /// User id whose profile and memory this session reads and writes.
    pub fn profile_user_id(&self) -> String {
        self.resolved_user.clone().unwrap_or_else(|| session_user_id(&self.session_id))
    }

    pub fn next_turn_id(&self) -> u64 {
        self.turns.len() as u64
    }
}

/// Profile id used by a session before (or without) identity resolution.
pub fn session_user_id(session_id: &str) -> String {
    format!("user-{session_id}")
}
