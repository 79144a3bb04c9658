//! Append-only JSON Lines storage with in-memory indexes rebuilt on load.

mod jsonl;
mod store;
mod vector_index;

pub use jsonl::{JsonlLog, LogError};
pub use store::{
    parse_turn_key, turn_key, vector_file_name, SessionHeader, Store, StoreError, StoreOptions, IDENTITY_INDEX,
    PROFILES_FILE, SESSIONS_FILE, TURNS_FILE, TURN_INDEX,
};
pub use vector_index::{IndexEntry, IndexError, ScoredKey, TieBreak, VectorIndex};
