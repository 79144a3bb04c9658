//! Personalized conversational pipeline.
//!
//! A turn flows through identity resolution over face embeddings
//! ([`encoder`]), cold-start profiling from a vision-language backend
//! ([`profile_init`]), retrieval of prior turns ([`memory`]), a reasoning
//! backend whose chain-of-thought output is parsed into steps, profile
//! updates and an answer ([`trace`]), and prior-to-posterior profile
//! refinement ([`orchestrator`]). [`rouge`] scores answers against
//! references. All model access goes through [`gateway`], which has an
//! HTTP implementation and a deterministic scripted mock.

pub mod bench;
pub mod clock;
pub mod config;
pub mod domain;
pub mod encoder;
pub mod gateway;
pub mod memory;
pub mod orchestrator;
pub mod parallel;
pub mod persistence;
pub mod profile_init;
pub mod rouge;
pub mod trace;
