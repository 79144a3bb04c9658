//! Durable profile, session and turn storage.
//!
//! Directory layout:
//!
//! ```text
//! <dir>/profiles.jsonl          every profile revision, in write order
//! <dir>/sessions.jsonl          session header snapshots (last one wins)
//! <dir>/turns.jsonl             conversation turns
//! <dir>/vectors-identity.jsonl  enrolled face embeddings
//! <dir>/vectors-turns.jsonl     turn text embeddings, scoped by user id
//! <dir>/.lock                   advisory lock held by the owning process
//! ```
//!
//! All state is rebuilt by replaying the files on open. Writes are checked
//! against the domain invariants before they reach disk.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::jsonl::{JsonlLog, LogError};
use super::vector_index::{TieBreak, VectorIndex};
use crate::domain::{provenance_monotone, ConversationTurn, ProfileInvariant, Role, Session, UserProfile};

pub const PROFILES_FILE: &str = "profiles.jsonl";
pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const TURNS_FILE: &str = "turns.jsonl";
pub const IDENTITY_INDEX: &str = "identity";
pub const TURN_INDEX: &str = "turns";

pub fn vector_file_name(index_name: &str) -> String {
    format!("vectors-{index_name}.jsonl")
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("store directory {path} unavailable: {source}")]
    Unavailable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("store {0} is locked by another process")]
    Locked(PathBuf),
    #[error("revision conflict for {user_id}: expected {expected}, got {actual}")]
    RevisionConflict { user_id: String, expected: u64, actual: u64 },
    #[error("profile {user_id} would revert a posterior field to prior")]
    ProvenanceReverted { user_id: String },
    #[error("invalid profile: {0}")]
    Invariant(#[from] ProfileInvariant),
    #[error("out-of-order turn in session {session_id}: expected {expected}, got {actual}")]
    OutOfOrderTurn { session_id: String, expected: u64, actual: u64 },
    #[error("agent turn in session {0} carries an image reference")]
    AgentImage(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} already exists")]
    DuplicateSession(String),
    #[error("session {session_id} profile revision would go from {from} to {to}")]
    SessionRevisionRegressed { session_id: String, from: u64, to: u64 },
}

/// Session fields stored in `sessions.jsonl`; turns live in `turns.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub session_id: String,
    #[serde(default)]
    pub resolved_user: Option<String>,
    #[serde(default)]
    pub profile_revision_at_last_turn: u64,
    #[serde(default)]
    pub consent: bool,
}

impl From<&Session> for SessionHeader {
    fn from(s: &Session) -> Self {
        Self {
            session_id: s.session_id.clone(),
            resolved_user: s.resolved_user.clone(),
            profile_revision_at_last_turn: s.profile_revision_at_last_turn,
            consent: s.consent,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// fsync every append before acknowledging it.
    pub fsync: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self { fsync: true }
    }
}

#[derive(Debug)]
struct Logs {
    profiles: JsonlLog<UserProfile>,
    sessions: JsonlLog<SessionHeader>,
    turns: JsonlLog<ConversationTurn>,
    _lock: File,
}

#[derive(Debug, Default)]
struct State {
    profiles: HashMap<String, Vec<UserProfile>>,
    sessions: HashMap<String, SessionHeader>,
    turns: HashMap<String, Vec<ConversationTurn>>,
}

impl State {
    fn check_profile(&self, profile: &UserProfile) -> Result<(), StoreError> {
        profile.validate()?;
        let history = self.profiles.get(&profile.user_id);
        let prev = history.and_then(|h| h.last());
        let expected = prev.map_or(0, |p| p.revision + 1);
        if profile.revision != expected {
            return Err(StoreError::RevisionConflict {
                user_id: profile.user_id.clone(),
                expected,
                actual: profile.revision,
            });
        }
        if let Some(prev) = prev {
            if !provenance_monotone(prev, profile) {
                return Err(StoreError::ProvenanceReverted { user_id: profile.user_id.clone() });
            }
        }
        Ok(())
    }

    fn check_session(&self, header: &SessionHeader) -> Result<(), StoreError> {
        if let Some(prev) = self.sessions.get(&header.session_id) {
            if prev.resolved_user == header.resolved_user
                && header.profile_revision_at_last_turn < prev.profile_revision_at_last_turn
            {
                return Err(StoreError::SessionRevisionRegressed {
                    session_id: header.session_id.clone(),
                    from: prev.profile_revision_at_last_turn,
                    to: header.profile_revision_at_last_turn,
                });
            }
        }
        Ok(())
    }

    fn check_turn(&self, turn: &ConversationTurn) -> Result<(), StoreError> {
        if !self.sessions.contains_key(&turn.session_id) {
            return Err(StoreError::UnknownSession(turn.session_id.clone()));
        }
        let expected = self.turns.get(&turn.session_id).map_or(0, |t| t.len() as u64);
        if turn.turn_id != expected {
            return Err(StoreError::OutOfOrderTurn {
                session_id: turn.session_id.clone(),
                expected,
                actual: turn.turn_id,
            });
        }
        if turn.role == Role::Agent && turn.image_ref.is_some() {
            return Err(StoreError::AgentImage(turn.session_id.clone()));
        }
        Ok(())
    }
}

/// Profiles, sessions, turns and both vector indexes.
///
/// Reads are concurrent. Writes go through one mutex, so writers to the same
/// user are serialized and revision checks cannot race.
#[derive(Debug)]
pub struct Store {
    dir: Option<PathBuf>,
    logs: Option<Logs>,
    state: RwLock<State>,
    write: Mutex<()>,
    identities: VectorIndex,
    turn_vectors: VectorIndex,
}

impl Store {
    /// Volatile store with no backing files.
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            logs: None,
            state: RwLock::new(State::default()),
            write: Mutex::new(()),
            identities: VectorIndex::in_memory(TieBreak::OldestFirst),
            turn_vectors: VectorIndex::in_memory(TieBreak::NewestFirst),
        }
    }

    /// Opens (creating if needed) a store directory and replays it.
    pub fn open(dir: impl AsRef<Path>, options: StoreOptions) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let unavailable = |source| StoreError::Unavailable { path: dir.clone(), source };
        fs::create_dir_all(&dir).map_err(unavailable)?;
        let lock =
            OpenOptions::new().create(true).truncate(false).write(true).open(dir.join(".lock")).map_err(unavailable)?;
        if lock.try_lock().is_err() {
            return Err(StoreError::Locked(dir));
        }

        let (profiles_log, profile_records) = JsonlLog::<UserProfile>::open(dir.join(PROFILES_FILE), options.fsync)?;
        let (sessions_log, session_records) = JsonlLog::<SessionHeader>::open(dir.join(SESSIONS_FILE), options.fsync)?;
        let (turns_log, turn_records) = JsonlLog::<ConversationTurn>::open(dir.join(TURNS_FILE), options.fsync)?;

        let mut state = State::default();
        let corrupt = |file: &str, line: usize, err: StoreError| {
            StoreError::Log(LogError::Corrupt { path: dir.join(file), line, message: err.to_string() })
        };
        for (i, p) in profile_records.into_iter().enumerate() {
            state.check_profile(&p).map_err(|e| corrupt(PROFILES_FILE, i + 1, e))?;
            state.profiles.entry(p.user_id.clone()).or_default().push(p);
        }
        for (i, s) in session_records.into_iter().enumerate() {
            state.check_session(&s).map_err(|e| corrupt(SESSIONS_FILE, i + 1, e))?;
            state.sessions.insert(s.session_id.clone(), s);
        }
        for (i, t) in turn_records.into_iter().enumerate() {
            state.check_turn(&t).map_err(|e| corrupt(TURNS_FILE, i + 1, e))?;
            state.turns.entry(t.session_id.clone()).or_default().push(t);
        }

        let identities =
            VectorIndex::open(&dir.join(vector_file_name(IDENTITY_INDEX)), TieBreak::OldestFirst, options.fsync)?;
        let turn_vectors =
            VectorIndex::open(&dir.join(vector_file_name(TURN_INDEX)), TieBreak::NewestFirst, options.fsync)?;

        Ok(Self {
            dir: Some(dir),
            logs: Some(Logs { profiles: profiles_log, sessions: sessions_log, turns: turns_log, _lock: lock }),
            state: RwLock::new(state),
            write: Mutex::new(()),
            identities,
            turn_vectors,
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Face embeddings keyed by user id; ties resolve to the earliest enrollment.
    pub fn identities(&self) -> &VectorIndex {
        &self.identities
    }

    /// Turn text embeddings keyed by [`turn_key`], scoped by user id.
    pub fn turn_vectors(&self) -> &VectorIndex {
        &self.turn_vectors
    }

    // ---- profiles ----

    /// Appends a profile revision. Must be revision 0 for a new user or
    /// exactly one past the stored revision.
    pub fn put_profile(&self, profile: &UserProfile) -> Result<u64, StoreError> {
        let _w = self.lock_writes();
        self.read().check_profile(profile)?;
        if let Some(logs) = &self.logs {
            logs.profiles.append(profile)?;
        }
        self.state_mut().profiles.entry(profile.user_id.clone()).or_default().push(profile.clone());
        Ok(profile.revision)
    }

    /// Highest stored revision for `user_id`.
    pub fn get_profile(&self, user_id: &str) -> Option<UserProfile> {
        self.read().profiles.get(user_id).and_then(|h| h.last().cloned())
    }

    pub fn profile_history(&self, user_id: &str) -> Vec<UserProfile> {
        self.read().profiles.get(user_id).cloned().unwrap_or_default()
    }

    pub fn user_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.read().profiles.keys().cloned().collect();
        ids.sort();
        ids
    }

    // ---- sessions ----

    pub fn create_session(&self, session_id: &str) -> Result<Session, StoreError> {
        let _w = self.lock_writes();
        if self.read().sessions.contains_key(session_id) {
            return Err(StoreError::DuplicateSession(session_id.to_string()));
        }
        let session = Session::new(session_id);
        let header = SessionHeader::from(&session);
        if let Some(logs) = &self.logs {
            logs.sessions.append(&header)?;
        }
        self.state_mut().sessions.insert(header.session_id.clone(), header);
        Ok(session)
    }

    /// Persists updated session fields (not turns).
    pub fn put_session(&self, header: &SessionHeader) -> Result<(), StoreError> {
        let _w = self.lock_writes();
        {
            let state = self.read();
            if !state.sessions.contains_key(&header.session_id) {
                return Err(StoreError::UnknownSession(header.session_id.clone()));
            }
            state.check_session(header)?;
        }
        if let Some(logs) = &self.logs {
            logs.sessions.append(header)?;
        }
        self.state_mut().sessions.insert(header.session_id.clone(), header.clone());
        Ok(())
    }

    pub fn session_exists(&self, session_id: &str) -> bool {
        self.read().sessions.contains_key(session_id)
    }

    /// Session header plus its turns in order.
    pub fn get_session(&self, session_id: &str) -> Option<Session> {
        let state = self.read();
        let h = state.sessions.get(session_id)?;
        Some(Session {
            session_id: h.session_id.clone(),
            resolved_user: h.resolved_user.clone(),
            profile_revision_at_last_turn: h.profile_revision_at_last_turn,
            consent: h.consent,
            turns: state.turns.get(session_id).cloned().unwrap_or_default(),
        })
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.read().sessions.keys().cloned().collect();
        ids.sort();
        ids
    }

    // ---- turns ----

    /// Appends a turn; `turn_id` must be the next id of its session.
    pub fn append_turn(&self, turn: &ConversationTurn) -> Result<(), StoreError> {
        let _w = self.lock_writes();
        self.read().check_turn(turn)?;
        if let Some(logs) = &self.logs {
            logs.turns.append(turn)?;
        }
        self.state_mut().turns.entry(turn.session_id.clone()).or_default().push(turn.clone());
        Ok(())
    }

    pub fn turns(&self, session_id: &str) -> Vec<ConversationTurn> {
        self.read().turns.get(session_id).cloned().unwrap_or_default()
    }

    pub fn turn(&self, session_id: &str, turn_id: u64) -> Option<ConversationTurn> {
        self.read().turns.get(session_id).and_then(|t| t.get(turn_id as usize).cloned())
    }

    /// Every turn missing from the turn vector index, in session then turn order.
    pub fn unembedded_turns(&self) -> Vec<ConversationTurn> {
        let state = self.read();
        let mut ids: Vec<&String> = state.turns.keys().collect();
        ids.sort();
        ids.into_iter()
            .flat_map(|id| state.turns[id].iter())
            .filter(|t| self.turn_vectors.get(&turn_key(&t.session_id, t.turn_id)).is_none())
            .cloned()
            .collect()
    }

    fn lock_writes(&self) -> std::sync::MutexGuard<'_, ()> {
        self.write.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn state_mut(&self) -> std::sync::RwLockWriteGuard<'_, State> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }
}

/// Vector-index key of a turn.
pub fn turn_key(session_id: &str, turn_id: u64) -> String {
    format!("{session_id}/{turn_id}")
}

/// Inverse of [`turn_key`].
pub fn parse_turn_key(key: &str) -> Option<(&str, u64)> {
    let (session, id) = key.rsplit_once('/')?;
    Some((session, id.parse().ok()?))
}
