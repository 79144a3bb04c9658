//! Conversation memory: turns are embedded on write and the most similar
//! earlier turns of the same user are retrieved into the prompt.
//!
//! One turn is one retrieval unit. Retrieval keys on the raw query text.

use crate::domain::{ConversationTurn, PromptContext, Role, UserProfile};
use crate::gateway::{GatewayError, TextEmbedder};
use crate::persistence::{parse_turn_key, turn_key, IndexError, Store, StoreError};
use crate::trace::TraceSyntax;

pub const DEFAULT_RETRIEVAL_K: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("turn text is empty")]
    EmptyText,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("turn index: {0}")]
    Index(#[from] IndexError),
}

/// A retrieved turn with its similarity to the query.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedTurn {
    pub turn: ConversationTurn,
    pub score: f64,
}

/// Instructions placed before every prompt.
pub fn default_preamble(syntax: &TraceSyntax) -> String {
    format!(
        "You are a patient assistant who adapts answers to the user described under PROFILE.\n\
         Reason step by step before answering. Put your reasoning between {open} and {close}, \
         one step per line, and write the final answer after {close}.\n\
         Fields marked (prior) were inferred from the user's appearance and may be wrong. \
         Do not rely on them blindly; when one matters, check it gently in conversation.\n\
         When the user confirms or corrects an attribute, or reveals a new one, add a line inside \
         the reasoning of the form\n\
         {directive} field=value\n\
         where field is age, gender, ethnicity, emotion or any other trait name. \
         Write ages as \"62 to 65\" or \"62\".",
        open = syntax.open,
        close = syntax.close,
        directive = syntax.directive,
    )
}

/// Persists `turn` and adds its text embedding to the user's memory.
///
/// If embedding fails for a backend reason the turn is still stored, just
/// without a vector; [`reembed_pending`] fills it in later. Returns the
/// stored turn.
pub fn index_turn(
    store: &Store,
    mut turn: ConversationTurn,
    user_id: &str,
    embedder: &dyn TextEmbedder,
) -> Result<ConversationTurn, MemoryError> {
    if turn.text.trim().is_empty() {
        return Err(MemoryError::EmptyText);
    }
    if turn.embedding.is_none() {
        match embedder.embed_text(&turn.text) {
            Ok(v) => turn.embedding = Some(v.quantized()),
            Err(e) if e.is_backend_failure() => {
                tracing::warn!(session = %turn.session_id, turn = turn.turn_id, error = %e, "storing turn unembedded");
            }
            Err(e) => return Err(e.into()),
        }
    }
    store.append_turn(&turn)?;
    if let Some(v) = &turn.embedding {
        store.turn_vectors().upsert(&turn_key(&turn.session_id, turn.turn_id), user_id, v.clone())?;
    }
    Ok(turn)
}

/// The `k` turns of `user_id` most similar to `query_text`, best first;
/// equal scores put the newer turn first.
pub fn retrieve_context(
    store: &Store,
    query_text: &str,
    user_id: &str,
    k: usize,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<RetrievedTurn>, MemoryError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if query_text.trim().is_empty() {
        return Err(MemoryError::EmptyText);
    }
    let index = store.turn_vectors();
    if index.is_empty() {
        return Ok(Vec::new());
    }
    let probe = embedder.embed_text(query_text)?;
    let hits = index.query(&probe, Some(user_id), k)?;
    Ok(hits
        .into_iter()
        .filter_map(|hit| {
            let (session, id) = parse_turn_key(&hit.key)?;
            store.turn(session, id).map(|turn| RetrievedTurn { turn, score: hit.score })
        })
        .collect())
}

/// Embeds every stored turn that has no vector yet. Returns how many were added.
pub fn reembed_pending(store: &Store, embedder: &dyn TextEmbedder) -> Result<usize, MemoryError> {
    let mut added = 0;
    for turn in store.unembedded_turns() {
        let Some(session) = store.get_session(&turn.session_id) else { continue };
        let vector = match &turn.embedding {
            Some(v) => v.clone(),
            None => embedder.embed_text(&turn.text)?,
        };
        store.turn_vectors().upsert(&turn_key(&turn.session_id, turn.turn_id), &session.profile_user_id(), vector)?;
        added += 1;
    }
    Ok(added)
}

fn context_line(turn: &ConversationTurn) -> String {
    let text: Vec<&str> = turn.text.split_whitespace().collect();
    format!("{}: {}", turn.role.as_str(), text.join(" "))
}

/// Builds the prompt. Retrieved turns are listed oldest first.
pub fn assemble_prompt(
    preamble: &str,
    profile: &UserProfile,
    retrieved: &[ConversationTurn],
    query: &str,
) -> PromptContext {
    let mut profile_block = profile.canonical_lines().join("\n");
    if !profile_block.is_empty() {
        profile_block.push('\n');
    }
    let mut ordered: Vec<&ConversationTurn> = retrieved.iter().collect();
    ordered.sort_by(|a, b| {
        (a.timestamp, &a.session_id, a.turn_id, a.role == Role::Agent).cmp(&(
            b.timestamp,
            &b.session_id,
            b.turn_id,
            b.role == Role::Agent,
        ))
    });
    PromptContext {
        system_preamble: preamble.to_string(),
        profile_block,
        retrieved_block: ordered.into_iter().map(context_line).collect(),
        user_query: query.to_string(),
    }
}
