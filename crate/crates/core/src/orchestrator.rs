//! One conversational turn, end to end.
//!
//! Order of work for a turn:
//!
//! 1. with a consented image on an unresolved session: embed the face and
//!    resolve identity; on no match, build a cold-start profile and enroll
//! 2. retrieve earlier turns of the user
//! 3. assemble the prompt
//! 4. generate with the reasoning backend
//! 5. parse the trace
//! 6. apply profile updates from the trace
//! 7. persist both turns, the profile revision and the session
//!
//! Every backend call happens before anything is written, so a backend
//! failure leaves the session exactly as it was.

use std::sync::Arc;

use crate::clock::{Clock, SystemClock};
use crate::domain::{
    Attribute, ConversationTurn, GenerationConfig, Provenance, ReasoningTrace, Role, Session, Trait, TurnRef,
    UserProfile, POSTERIOR_CONFIDENCE,
};
use crate::encoder::{enroll, resolve_identity, EncoderError, Resolution, DEFAULT_MATCH_THRESHOLD};
use crate::gateway::{Backends, ChatMessage, GatewayError, ImageData, DEFAULT_MAX_IMAGE_BYTES};
use crate::memory::{assemble_prompt, default_preamble, retrieve_context, MemoryError, DEFAULT_RETRIEVAL_K};
use crate::persistence::{turn_key, SessionHeader, Store, StoreError};
use crate::profile_init::{init_profile_from_image, parse_age_value, DEFAULT_COLD_START_QUERY};
use crate::trace::{TraceError, TraceSyntax};

#[derive(Debug, thiserror::Error)]
pub enum TurnError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("turn text is empty")]
    EmptyText,
    #[error("invalid generation settings")]
    InvalidGeneration,
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

impl From<MemoryError> for TurnError {
    fn from(e: MemoryError) -> Self {
        match e {
            MemoryError::EmptyText => TurnError::EmptyText,
            MemoryError::Gateway(g) => TurnError::Backend(g),
            MemoryError::Store(s) => TurnError::Store(s),
            MemoryError::Index(i) => TurnError::Encoder(i.into()),
        }
    }
}

/// Applies profile updates from one trace.
///
/// Recognized fields (age, gender, ethnicity, emotion) and trait names are
/// set with `Posterior` provenance. The revision goes up by one iff `deltas`
/// is non-empty. Visual attributes are skipped when the profile has no
/// consent, and malformed values are skipped; both are logged.
pub fn apply_deltas(profile: &UserProfile, deltas: &[(String, String)]) -> UserProfile {
    let mut next = profile.clone();
    if deltas.is_empty() {
        return next;
    }
    for (field, value) in deltas {
        let field = field.trim();
        let value = value.trim();
        if field.is_empty() || value.is_empty() {
            tracing::warn!(field, value, "skipping empty profile update");
            continue;
        }
        let key = field.to_lowercase();
        let visual = matches!(key.as_str(), "age" | "age_range" | "gender" | "ethnicity" | "emotion");
        if visual && !next.consent_granted {
            tracing::info!(field, "skipping visual attribute update without consent");
            continue;
        }
        match key.as_str() {
            "age" | "age_range" => match parse_age_value(value) {
                Some(age) => next.age_range = Some(Attribute::posterior(age)),
                None => tracing::warn!(value, "skipping malformed age update"),
            },
            "gender" => next.gender = Some(Attribute::posterior(value.to_string())),
            "ethnicity" => next.ethnicity = Some(Attribute::posterior(value.to_string())),
            "emotion" => next.emotion = Some(Attribute::posterior(value.to_string())),
            _ => match next.extra_traits.iter_mut().find(|t| t.name == field) {
                Some(t) => {
                    t.value = value.to_string();
                    t.provenance = Provenance::Posterior;
                    t.confidence = POSTERIOR_CONFIDENCE;
                }
                None => next.extra_traits.push(Trait {
                    name: field.to_string(),
                    value: value.to_string(),
                    provenance: Provenance::Posterior,
                    confidence: POSTERIOR_CONFIDENCE,
                }),
            },
        }
    }
    next.revision = profile.revision + 1;
    next
}

/// Tunables for [`Pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub retrieval_k: usize,
    pub match_threshold: f64,
    pub cold_start_query: String,
    pub preamble: String,
    pub syntax: TraceSyntax,
    pub generation: GenerationConfig,
    pub max_image_bytes: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        let syntax = TraceSyntax::default();
        Self {
            retrieval_k: DEFAULT_RETRIEVAL_K,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            cold_start_query: DEFAULT_COLD_START_QUERY.to_string(),
            preamble: default_preamble(&syntax),
            syntax,
            generation: GenerationConfig::default(),
            max_image_bytes: DEFAULT_MAX_IMAGE_BYTES,
        }
    }
}

/// One user message.
#[derive(Debug, Clone, Default)]
pub struct TurnInput {
    pub text: String,
    pub image: Option<ImageData>,
    /// Updates the session's consent before the turn is processed.
    pub consent: Option<bool>,
}

impl TurnInput {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), ..Default::default() }
    }
}

/// What identity resolution did during a turn.
#[derive(Debug, Clone, PartialEq)]
pub enum IdentityEvent {
    Matched { user_id: String, score: f64 },
    Enrolled { user_id: String, profile_text: String },
}

#[derive(Debug, Clone)]
pub struct TurnOutcome {
    pub reply: String,
    pub trace: ReasoningTrace,
    pub profile: UserProfile,
    pub user_turn: ConversationTurn,
    pub agent_turn: ConversationTurn,
    pub identity: Option<IdentityEvent>,
    /// True if a turn was stored without its text embedding.
    pub degraded: bool,
}

/// Store, backends and settings wired together.
pub struct Pipeline {
    store: Arc<Store>,
    backends: Backends,
    settings: PipelineSettings,
    clock: Arc<dyn Clock>,
}

impl Pipeline {
    pub fn new(store: Arc<Store>, backends: Backends, settings: PipelineSettings) -> Self {
        Self { store, backends, settings, clock: Arc::new(SystemClock) }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    pub fn create_session(&self, session_id: &str) -> Result<Session, TurnError> {
        Ok(self.store.create_session(session_id)?)
    }

    pub fn set_consent(&self, session_id: &str, consent: bool) -> Result<Session, TurnError> {
        let mut session =
            self.store.get_session(session_id).ok_or_else(|| TurnError::UnknownSession(session_id.to_string()))?;
        if session.consent != consent {
            session.consent = consent;
            self.store.put_session(&SessionHeader::from(&session))?;
        }
        Ok(session)
    }

    /// Latest profile the session reads and writes, if one was stored.
    pub fn session_profile(&self, session_id: &str) -> Result<Option<UserProfile>, TurnError> {
        let session =
            self.store.get_session(session_id).ok_or_else(|| TurnError::UnknownSession(session_id.to_string()))?;
        Ok(self.store.get_profile(&session.profile_user_id()))
    }

    /// Runs one turn. See the module docs for the order of work.
    pub fn run_turn(&self, session_id: &str, input: TurnInput) -> Result<TurnOutcome, TurnError> {
        let mut session =
            self.store.get_session(session_id).ok_or_else(|| TurnError::UnknownSession(session_id.to_string()))?;
        if input.text.trim().is_empty() {
            return Err(TurnError::EmptyText);
        }
        if !self.settings.generation.is_valid() {
            return Err(TurnError::InvalidGeneration);
        }
        if let Some(consent) = input.consent {
            session.consent = consent;
        }

        // (1) identity resolution / cold start
        let mut identity = None;
        let mut enrollment = None;
        let mut cold_profile = None;
        let mut image_ref = None;
        match (&input.image, session.consent, &session.resolved_user) {
            (Some(image), true, None) => {
                image_ref = Some(image.reference.clone());
                let probe = self.backends.image_embed.embed_image(image)?;
                match resolve_identity(&probe, self.store.identities(), self.settings.match_threshold)? {
                    Resolution::Match(m) => {
                        session.resolved_user = Some(m.user_id.clone());
                        identity = Some(IdentityEvent::Matched { user_id: m.user_id, score: m.score });
                    }
                    Resolution::NoMatch => {
                        let user_id = session.profile_user_id();
                        let cold = init_profile_from_image(
                            &user_id,
                            image,
                            &self.settings.cold_start_query,
                            self.backends.vision.as_ref(),
                            &self.settings.generation,
                            true,
                        )?;
                        let profile = match self.store.get_profile(&user_id) {
                            Some(mut existing) => {
                                existing.consent_granted = true;
                                existing.merge_prior(cold.profile.fields());
                                existing.revision += 1;
                                existing
                            }
                            None => cold.profile,
                        };
                        session.resolved_user = Some(user_id.clone());
                        identity =
                            Some(IdentityEvent::Enrolled { user_id: user_id.clone(), profile_text: cold.profile_text });
                        enrollment = Some((user_id, probe));
                        cold_profile = Some(profile);
                    }
                }
            }
            (Some(_), false, _) => tracing::info!(session_id, "image ignored: consent not granted"),
            (Some(_), true, Some(_)) => tracing::debug!(session_id, "image ignored: session already resolved"),
            (None, _, _) => {}
        }

        let user_id = session.profile_user_id();
        let stored_profile = self.store.get_profile(&user_id);
        let base_profile = cold_profile
            .clone()
            .or_else(|| stored_profile.clone())
            .unwrap_or_else(|| UserProfile::empty(&user_id, false));

        // (2) retrieval, (3) prompt
        let retrieved = retrieve_context(
            &self.store,
            &input.text,
            &user_id,
            self.settings.retrieval_k,
            self.backends.text_embed.as_ref(),
        )?;
        let retrieved: Vec<ConversationTurn> = retrieved.into_iter().map(|r| r.turn).collect();
        let prompt = assemble_prompt(&self.settings.preamble, &base_profile, &retrieved, &input.text);
        let messages =
            vec![ChatMessage::system(prompt.system_preamble.clone()), ChatMessage::user(prompt.render_body())];

        // (4) generate, (5) parse
        let raw = self.backends.chat.chat_complete(&messages, &self.settings.generation)?;
        let trace = self.settings.syntax.parse(&raw)?;

        // (6) profile update
        let mut pre_update = base_profile.clone();
        if !trace.profile_deltas.is_empty() && session.consent && !pre_update.consent_granted {
            pre_update.consent_granted = true;
        }
        let updated = apply_deltas(&pre_update, &trace.profile_deltas);

        // memory embeddings, still before any write
        let mut degraded = false;
        let mut embed = |text: &str| match self.backends.text_embed.embed_text(text) {
            Ok(v) => Ok(Some(v.quantized())),
            Err(e) if e.is_backend_failure() => {
                tracing::warn!(session_id, error = %e, "turn will be stored without embedding");
                degraded = true;
                Ok(None)
            }
            Err(e) => Err(e),
        };
        let user_vec = embed(&input.text)?;
        let agent_vec = embed(&trace.final_answer)?;

        // (7) commit
        let user_turn_id = session.next_turn_id();
        let origin = Some(TurnRef { session_id: session_id.to_string(), turn_id: user_turn_id + 1 });
        let stamped = |p: &UserProfile| UserProfile { origin: origin.clone(), ..p.clone() };
        let mut base_profile = base_profile;
        let mut updated = updated;
        if let Some((uid, probe)) = &enrollment {
            enroll(uid, probe, self.store.identities())?;
        }
        if cold_profile.is_some() || stored_profile.is_none() {
            base_profile = stamped(&base_profile);
            self.store.put_profile(&base_profile)?;
        }
        if updated.revision != base_profile.revision {
            updated = stamped(&updated);
            self.store.put_profile(&updated)?;
        } else {
            updated = base_profile.clone();
        }

        let user_turn = ConversationTurn {
            turn_id: user_turn_id,
            session_id: session_id.to_string(),
            role: Role::User,
            text: input.text.clone(),
            timestamp: self.clock.now_ms(),
            image_ref,
            embedding: user_vec,
            trace: None,
        };
        let agent_turn = ConversationTurn {
            turn_id: user_turn.turn_id + 1,
            session_id: session_id.to_string(),
            role: Role::Agent,
            text: trace.final_answer.clone(),
            timestamp: self.clock.now_ms(),
            image_ref: None,
            embedding: agent_vec,
            trace: Some(trace.clone()),
        };
        for turn in [&user_turn, &agent_turn] {
            self.store.append_turn(turn)?;
            if let Some(v) = &turn.embedding {
                self.store
                    .turn_vectors()
                    .upsert(&turn_key(&turn.session_id, turn.turn_id), &user_id, v.clone())
                    .map_err(EncoderError::from)?;
            }
        }
        session.turns.push(user_turn.clone());
        session.turns.push(agent_turn.clone());
        session.profile_revision_at_last_turn = updated.revision;
        self.store.put_session(&SessionHeader::from(&session))?;

        Ok(TurnOutcome {
            reply: trace.final_answer.clone(),
            trace,
            profile: updated,
            user_turn,
            agent_turn,
            identity,
            degraded,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::AgeRange;

    fn d(f: &str, v: &str) -> (String, String) {
        (f.to_string(), v.to_string())
    }

    #[test]
    fn empty_deltas_are_identity() {
        let p = UserProfile::empty("u", true);
        assert_eq!(apply_deltas(&p, &[]), p);
    }

    #[test]
    fn confirmation_promotes() {
        let mut p = UserProfile::empty("u", true);
        p.gender = Some(Attribute::prior("female".to_string()));
        let q = apply_deltas(&p, &[d("gender", "female")]);
        assert_eq!(q.gender.unwrap().provenance, Provenance::Posterior);
        assert_eq!(q.revision, 1);
    }

    #[test]
    fn age_and_new_trait() {
        let p = UserProfile::empty("u", true);
        let q = apply_deltas(&p, &[d("age", "62 to 65"), d("hobby", "gardening")]);
        assert_eq!(q.age_range.as_ref().unwrap().value, AgeRange::new(62, 65).unwrap());
        assert_eq!(q.age_range.as_ref().unwrap().provenance, Provenance::Posterior);
        assert_eq!(q.trait_value("hobby"), Some("gardening"));
        assert_eq!(q.revision, 1);
    }

    #[test]
    fn malformed_and_unconsented_are_skipped() {
        let p = UserProfile::empty("u", false);
        let q = apply_deltas(&p, &[d("age", "sixty-ish"), d("gender", "male"), d("city", "Lyon")]);
        assert!(!q.has_visual_fields());
        assert!(!q.consent_granted);
        assert_eq!(q.trait_value("city"), Some("Lyon"));
        assert_eq!(q.revision, 1);
        q.validate().unwrap();
    }
}
